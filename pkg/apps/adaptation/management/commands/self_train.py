from apps.adaptation.management.commands._stage import StageCommand


class Command(StageCommand):
    help = 'Run the pseudo-label self-training loop'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--generator',
            choices=['resnet', 'unet'],
            default=None,
            help='Generator whose translations seed the loop (default: from config)'
        )

    def run_stage(self, service, options):
        return service.self_train(options['generator'])
