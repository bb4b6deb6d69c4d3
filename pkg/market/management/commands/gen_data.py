import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from market.exceptions import MarketError
from market.panel import PLANTED_SIGNAL, gen_synthetic, write_panel


class Command(BaseCommand):
    help = 'Generate a synthetic OHLCV panel with a planted momentum signal'

    def add_arguments(self, parser):
        parser.add_argument(
            '--instruments',
            type=int,
            default=100,
            help='Number of instruments (default: 100, min: 2)'
        )
        parser.add_argument(
            '--dates',
            type=int,
            default=750,
            help='Number of business days (default: 750, min: 10)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=7,
            help='Random seed (default: 7)'
        )
        parser.add_argument(
            '--signal',
            type=float,
            default=0.6,
            help='Planted signal strength in [0, 1] (default: 0.6)'
        )
        parser.add_argument(
            '--start',
            type=str,
            default='2020-01-01',
            help='First calendar date of the panel (default: 2020-01-01)'
        )
        parser.add_argument(
            '--output',
            type=str,
            default='panel.csv',
            help='Output CSV path (default: panel.csv)'
        )

    def handle(self, *args, **options):
        instruments = options['instruments']
        dates = options['dates']
        signal = options['signal']

        if instruments < 2:
            raise CommandError('--instruments must be at least 2')
        if dates < 10:
            raise CommandError('--dates must be at least 10')
        if not 0.0 <= signal <= 1.0:
            raise CommandError('--signal must lie in [0, 1]')

        try:
            panel = gen_synthetic(instruments, dates, options['seed'], signal, start=options['start'])
        except MarketError as exc:
            raise CommandError(str(exc))

        output = Path(options['output'])
        output.parent.mkdir(parents=True, exist_ok=True)
        write_panel(panel, output)

        # Ground truth for recovery checks
        sidecar = output.with_name(output.stem + '.signal.json')
        sidecar.write_text(json.dumps({
            'formula': PLANTED_SIGNAL.formula,
            'window': PLANTED_SIGNAL.window,
            'description': PLANTED_SIGNAL.description,
            'signal_strength': signal,
            'seed': options['seed'],
            'instruments': instruments,
            'dates': dates,
        }, indent=2, sort_keys=True))

        self.stdout.write(f"Wrote {instruments * dates} rows to {output}")
        self.stdout.write(self.style.SUCCESS(f"Planted signal recorded in {sidecar}"))
