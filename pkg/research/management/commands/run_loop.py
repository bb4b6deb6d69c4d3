from django.core.management.base import BaseCommand, CommandError

from market.exceptions import MarketError
from research.conf import load_run_config
from research.exceptions import ConfigurationError, PersistenceError, ResearchError
from research.loop import ResearchLoop


class Command(BaseCommand):
    help = 'Run the factor/model research loop and print the final SOTA metrics'

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='Run-config env file (default: settings and environment only)'
        )
        parser.add_argument('--seed', type=int, default=None, help='Scheduler random seed')
        parser.add_argument(
            '--max-loops',
            type=int,
            default=None,
            help='Total number of loops, counting resumed ones'
        )
        parser.add_argument(
            '--scheduler',
            type=str,
            choices=['bandit', 'random', 'llm'],
            default=None,
            help='Action scheduler'
        )
        parser.add_argument(
            '--generator',
            type=str,
            choices=['template', 'gateway'],
            default=None,
            help='Hypothesis generator'
        )
        parser.add_argument('--output-dir', type=str, default=None, help='Run directory')
        parser.add_argument(
            '--wall-clock',
            type=float,
            default=None,
            help='Wall-clock budget in seconds (0 disables it)'
        )
        parser.add_argument(
            '--resume',
            action='store_true',
            help='Continue from the state persisted in the run directory'
        )

    def handle(self, *args, **options):
        if options['max_loops'] is not None and options['max_loops'] < 0:
            raise CommandError('--max-loops must be non-negative')
        try:
            run_config = load_run_config(
                options['config'],
                seed=options['seed'],
                max_loops=options['max_loops'],
                scheduler=options['scheduler'],
                generator=options['generator'],
                output_dir=options['output_dir'],
                wall_clock_seconds=options['wall_clock'],
            )
            loop = ResearchLoop(run_config)
        except ConfigurationError as exc:
            raise CommandError(f"configuration error: {exc}")
        except (MarketError, ResearchError) as exc:
            raise CommandError(str(exc))

        self.stdout.write(self.style.NOTICE(
            f"Running {run_config.max_loops} loops "
            f"(scheduler={run_config.scheduler}, generator={run_config.generator}, seed={run_config.seed})"
        ))
        try:
            loop.start(resume=options['resume'])
            summary = loop.run()
            final = loop.final_evaluation()
            loop.write_reports(final)
        except PersistenceError as exc:
            raise CommandError(f"persistence failed: {exc}")
        except (MarketError, ResearchError) as exc:
            raise CommandError(str(exc))

        self.stdout.write("Final SOTA metrics (test range):")
        for key, value in final.metrics.to_dict().items():
            shown = 'nan' if value is None else f"{value:.6f}"
            self.stdout.write(f"{key:>10}: {shown}")
        self.stdout.write(
            f"TL={summary.total_loops} VL={summary.valid_loops} SL={summary.sota_selections}"
        )
        if summary.tokens:
            self.stdout.write(
                f"Tokens: prompt={summary.tokens['prompt_tokens']} "
                f"completion={summary.tokens['completion_tokens']}"
            )
        self.stdout.write(self.style.SUCCESS(f"Run written to {loop.output_dir}"))
