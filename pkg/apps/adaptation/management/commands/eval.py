from apps.adaptation.management.commands._stage import StageCommand


class Command(StageCommand):
    help = 'Evaluate every trained segmenter on the target eval cases'

    def run_stage(self, service, options):
        return service.evaluate()
