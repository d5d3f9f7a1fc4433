from apps.adaptation.management.commands._stage import StageCommand


class Command(StageCommand):
    help = 'Run the whole pipeline: data, translation, self-training, evaluation and report'

    def run_stage(self, service, options):
        return service.run_all()
