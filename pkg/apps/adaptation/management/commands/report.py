from apps.adaptation.management.commands._stage import StageCommand


class Command(StageCommand):
    help = 'Aggregate stored case metrics into the comparison report'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--seeds',
            type=int,
            nargs='+',
            default=None,
            help='Summarize the finished runs of these master seeds: medians and trend checks'
        )

    def run_stage(self, service, options):
        if options['seeds']:
            outcome = service.summarize_seeds(options['seeds'])
            text = outcome.path / 'summary.txt'
        else:
            outcome = service.report()
            text = outcome.path / 'report.txt'
        if text.exists():
            self.stdout.write(text.read_text(encoding='utf-8'))
        return outcome
