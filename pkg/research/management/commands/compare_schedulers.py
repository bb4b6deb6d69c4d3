from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from market.exceptions import MarketError
from research.ablation import compare_schedulers
from research.conf import load_run_config
from research.exceptions import ResearchError


class Command(BaseCommand):
    help = 'Compare action schedulers over several seeds on one synthetic panel'

    def add_arguments(self, parser):
        parser.add_argument('--config', type=str, default=None, help='Run-config env file')
        parser.add_argument(
            '--seeds',
            type=int,
            default=10,
            help='Number of seeds, 0..N-1 (default: 10)'
        )
        parser.add_argument(
            '--schedulers',
            type=str,
            default='bandit,random',
            help='Comma-separated schedulers to compare (default: bandit,random)'
        )
        parser.add_argument('--max-loops', type=int, default=None, help='Loops per run')
        parser.add_argument('--output-dir', type=str, default=None, help='Root directory for the runs')

    def handle(self, *args, **options):
        if options['seeds'] < 1:
            raise CommandError('--seeds must be at least 1')
        schedulers = [s.strip() for s in options['schedulers'].split(',') if s.strip()]
        for name in schedulers:
            if name not in ('bandit', 'random', 'llm'):
                raise CommandError(f"unknown scheduler {name!r}")

        try:
            run_config = load_run_config(options['config'], output_dir=options['output_dir'])
            result = compare_schedulers(
                run_config,
                range(options['seeds']),
                schedulers=schedulers,
                max_loops=options['max_loops'],
            )
        except (MarketError, ResearchError) as exc:
            raise CommandError(str(exc))

        out = Path(run_config.output_dir)
        result.write_csv(out / 'ablation.csv')

        means = result.mean_scores()
        for name in schedulers:
            self.stdout.write(f"{name:>8}: mean final score {means[name]:.6f}")
        if 'bandit' in means and 'random' in means and means['bandit'] < means['random']:
            self.stdout.write(self.style.WARNING('bandit scheduler scored below random'))
        self.stdout.write(self.style.SUCCESS(f"Ablation written to {out / 'ablation.csv'}"))
