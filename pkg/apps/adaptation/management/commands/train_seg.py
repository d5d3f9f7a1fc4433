from apps.adaptation.management.commands._stage import StageCommand


class Command(StageCommand):
    help = 'Train a segmenter on raw source or on translated volumes'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--on',
            choices=['source', 'translated'],
            default='translated',
            help='Training data: untranslated source volumes or pseudo-target volumes'
        )
        parser.add_argument(
            '--generator',
            choices=['resnet', 'unet'],
            default=None,
            help='Generator whose translations are used with --on translated'
        )

    def run_stage(self, service, options):
        return service.train_seg(options['on'], options['generator'])
