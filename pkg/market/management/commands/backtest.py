import json
from pathlib import Path

import pandas as pd
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from analytics.exceptions import MetricsError
from analytics.metrics import MetricsBundle, daily_ic_series, daily_rank_ic_series, prediction_metrics
from analytics.reports import write_nav_csv, yearly_ic_table
from market.backtest import StrategyConfig, run_backtest
from market.dsl import evaluate
from market.exceptions import DslError, MarketError
from market.library import load_library
from market.panel import PipelineConfig, compute_labels, concat_features, load_panel, prepare_factor
from market.predictor import (
    LAG_SEPARATOR,
    LinearModel,
    ModelSpec,
    build_design,
    predict,
    select_ridge,
    split_by_fraction,
)


class Command(BaseCommand):
    help = 'Backtest a factor library and linear model on a panel CSV'

    def add_arguments(self, parser):
        parser.add_argument('--panel', type=str, required=True, help='Panel CSV path')
        parser.add_argument('--factors', type=str, required=True, help='Factor library JSON path')
        parser.add_argument(
            '--model',
            type=str,
            default=None,
            help='Fitted model JSON; when omitted a model is fitted on the train range'
        )
        parser.add_argument(
            '--strategy-config',
            type=str,
            default=None,
            help='Strategy JSON; keys override the preset'
        )
        parser.add_argument(
            '--preset',
            type=str,
            choices=['csi', 'nasdaq'],
            default=settings.RESEARCH['STRATEGY_PRESET'],
            help='Strategy preset (default: from settings)'
        )
        parser.add_argument(
            '--transform',
            type=str,
            choices=['none', 'zscore'],
            default='none',
            help='Feature transform applied before the model (default: none)'
        )
        parser.add_argument(
            '--output-dir',
            type=str,
            default='backtest',
            help='Directory for report.json, nav.csv, trades.csv and yearly_ic.csv'
        )

    def handle(self, *args, **options):
        for flag in ('panel', 'factors'):
            path = options[flag]
            if not path or not Path(path).is_file():
                raise CommandError(f"--{flag} must name an existing file")

        research = settings.RESEARCH
        try:
            strategy = self._strategy(options)
            panel = load_panel(options['panel'])
            library = load_library(options['factors'])
            if not library:
                raise CommandError('--factors holds no factors')
            cfg = PipelineConfig(research['EPSILON'], research['HORIZON_TAU'], research['WINDOW_ELL'])
            split = split_by_fraction(panel.dates, research['TRAIN_FRACTION'], research['VALID_FRACTION'])
            labels = compute_labels(panel, cfg)
        except (MarketError, ValueError) as exc:
            raise CommandError(str(exc))

        # Evaluate and prepare every factor
        try:
            prepared = [
                (name, prepare_factor(evaluate(expr, panel, name, cfg.window_ell), cfg))
                for name, expr in library
            ]
        except DslError as exc:
            raise CommandError(f"factor evaluation failed: {exc}")
        features = concat_features(panel, prepared)
        names = [name for name, _ in prepared]

        try:
            if options['model']:
                model = LinearModel.load(options['model'])
                spec = ModelSpec(feature_transform=options['transform'], lookback=self._lookback(model))
                design = build_design(features, names, spec, cfg.epsilon)
            else:
                spec = ModelSpec(feature_transform=options['transform'], ridge_grid=research['RIDGE_GRID'])
                design = build_design(features, names, spec, cfg.epsilon)
                model = select_ridge(design, labels, split, spec.ridge_grid).model
            scores = predict(model, design, model.feature_names, split.test)
            report = run_backtest(scores, panel, strategy, split.test)
        except MarketError as exc:
            raise CommandError(str(exc))

        realized = labels.raw[:, split.test.mask(panel.dates)]
        ic = daily_ic_series(scores.values, realized, scores.dates)
        rank_ic = daily_rank_ic_series(scores.values, realized, scores.dates)
        try:
            metrics = MetricsBundle.combine(prediction_metrics(ic, rank_ic), report.strategy_metrics())
        except MetricsError as exc:
            raise CommandError(str(exc))

        out = Path(options['output_dir'])
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            'metrics': metrics.to_dict(),
            'strategy': strategy.to_dict(),
            'split': split.to_dict(),
            'backtest': report.to_dict(),
        }
        (out / 'report.json').write_text(json.dumps(payload, indent=2, default=str))
        write_nav_csv(report, out / 'nav.csv')
        report.write_trades_csv(out / 'trades.csv')
        pd.DataFrame(yearly_ic_table(ic, rank_ic)).to_csv(out / 'yearly_ic.csv', index=False)
        if not options['model']:
            model.save(out / 'model.json')

        for key, value in metrics.to_dict().items():
            shown = 'nan' if value is None else f"{value:.6f}"
            self.stdout.write(f"{key:>10}: {shown}")
        self.stdout.write(self.style.SUCCESS(f"Backtest report written to {out}"))

    def _strategy(self, options):
        base = StrategyConfig.preset(options['preset']).to_dict()
        if options['strategy_config']:
            path = Path(options['strategy_config'])
            if not path.is_file():
                raise CommandError(f"--strategy-config {path} does not exist")
            base.update(json.loads(path.read_text()))
        return StrategyConfig.from_dict(base)

    def _lookback(self, model):
        # lagged copies are named <factor>@lag<k>
        lags = [
            int(name.rsplit(LAG_SEPARATOR, 1)[1])
            for name in model.feature_names
            if LAG_SEPARATOR in name
        ]
        return max(lags, default=0) + 1
