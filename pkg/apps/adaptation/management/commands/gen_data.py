from apps.adaptation.management.commands._stage import StageCommand


class Command(StageCommand):
    help = 'Generate the synthetic source/target phantom dataset'

    def run_stage(self, service, options):
        return service.gen_data()
