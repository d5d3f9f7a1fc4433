"""
Общая основа management-команд пайплайна.

Ошибки пайплайна переводятся в CommandError с кодом выхода класса ошибки:
3 конфигурация, 4 нет входных данных, 5 ввод-вывод объёмов, 6 данные,
7 модель, 8 сбой стадии. Ошибки разбора аргументов Django завершает кодом 2.
"""

import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from apps.adaptation.exceptions import AdaptationError, StageError
from apps.adaptation.experiment import load_config
from apps.adaptation.services import PipelineService

logger = logging.getLogger(__name__)


class StageCommand(BaseCommand):
    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='Path to the JSON experiment config (default: built-in desk configuration)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=None,
            help='Override the master seed of the config'
        )
        parser.add_argument(
            '--force',
            action='store_true',
            help='Rerun the stage even if it is up to date'
        )
        parser.add_argument(
            '--threads',
            type=int,
            default=None,
            help='Intra-op threads and parallel workers (default: UDA_THREADS)'
        )

    def run_stage(self, service: PipelineService, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        threads = options['threads'] if options['threads'] is not None else settings.UDA_THREADS
        try:
            cfg = load_config(options['config'], seed=options['seed'])
            service = PipelineService(cfg, settings.UDA_RUN_ROOT, threads=threads, force=options['force'])
            outcomes = self.run_stage(service, options)
        except AdaptationError as e:
            raise CommandError(f'{type(e).__name__}: {e}', returncode=e.exit_code) from e
        except CommandError:
            raise
        except Exception as e:
            logger.exception('Unexpected failure')
            raise CommandError(f'StageError: {e}', returncode=StageError.exit_code) from e

        if not isinstance(outcomes, (list, tuple)):
            outcomes = [outcomes]
        for outcome in outcomes:
            if outcome.up_to_date:
                self.stdout.write(f'{outcome.stage}: up to date ({outcome.path})')
            else:
                detail = f' ({outcome.message})' if outcome.message else ''
                self.stdout.write(self.style.SUCCESS(f'{outcome.stage}: done{detail}'))
            if outcome.message.startswith('Generator check') and 'WARNING' in outcome.message:
                self.stdout.write(self.style.WARNING(outcome.message))
