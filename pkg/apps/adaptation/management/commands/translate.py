from apps.adaptation.management.commands._stage import StageCommand


class Command(StageCommand):
    help = 'Translate labelled source volumes into pseudo-target volumes'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--generator',
            choices=['resnet', 'unet'],
            default=None,
            help='Generator architecture (default: from config)'
        )

    def run_stage(self, service, options):
        return service.translate(options['generator'])
