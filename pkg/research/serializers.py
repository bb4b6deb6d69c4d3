from decouple import Csv
from rest_framework import serializers

from market.dsl import parse
from market.exceptions import DslError


class FloatListField(serializers.Field):
    """Comma-separated text or a list, read as floats"""

    def __init__(self, allow_empty=True, **kwargs):
        self.allow_empty = allow_empty
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        try:
            if isinstance(data, str):
                values = Csv(cast=float)(data)
            else:
                values = [float(v) for v in data]
        except (TypeError, ValueError):
            raise serializers.ValidationError("expected a comma-separated list of numbers")
        if not values and not self.allow_empty:
            raise serializers.ValidationError("at least one value is required")
        return tuple(values)

    def to_representation(self, value):
        return list(value)


class OptionalFloatField(serializers.FloatField):
    """Float that also accepts none/off/empty as null"""

    def to_internal_value(self, data):
        if data is None or (isinstance(data, str) and data.strip().lower() in ("", "none", "off")):
            return None
        return super().to_internal_value(data)


class RunConfigSerializer(serializers.Serializer):
    """Flat key-value run configuration, one field per config key"""
    # run
    seed = serializers.IntegerField()
    max_loops = serializers.IntegerField(min_value=0)
    wall_clock_seconds = serializers.FloatField(min_value=0.0)
    scheduler = serializers.ChoiceField(choices=["bandit", "random", "llm"])
    generator = serializers.ChoiceField(choices=["template", "gateway"])
    output_dir = serializers.CharField()
    # data
    panel_path = serializers.CharField(allow_blank=True)
    n_instruments = serializers.IntegerField(min_value=2)
    n_dates = serializers.IntegerField(min_value=10)
    signal_strength = serializers.FloatField(min_value=0.0, max_value=1.0)
    data_seed = serializers.IntegerField()
    # pipeline
    epsilon = serializers.FloatField()
    horizon_tau = serializers.IntegerField(min_value=1)
    window_ell = serializers.IntegerField(min_value=1)
    train_fraction = serializers.FloatField()
    valid_fraction = serializers.FloatField()
    ridge_grid = FloatListField(allow_empty=False)
    # strategy
    strategy_preset = serializers.ChoiceField(choices=["csi", "nasdaq"])
    topk = serializers.IntegerField(min_value=1, required=False)
    n_drop = serializers.IntegerField(min_value=0, required=False)
    buy_cost = serializers.FloatField(required=False)
    sell_cost = serializers.FloatField(required=False)
    min_fee = serializers.FloatField(required=False)
    price_limit = OptionalFloatField(required=False, allow_null=True)
    initial_cash = serializers.FloatField(required=False)
    retention_rank = serializers.IntegerField(min_value=1, required=False)
    # co-steer
    costeer_delta = serializers.FloatField()
    sim_threshold = serializers.FloatField(min_value=0.0, max_value=1.0)
    max_inner_iters = serializers.IntegerField(min_value=1)
    max_outer_rounds = serializers.IntegerField(min_value=1)
    # bandit
    bandit_tau = serializers.FloatField()
    bandit_sigma = serializers.FloatField()
    reward_mode = serializers.ChoiceField(choices=["delta", "absolute"])
    reward_weights = FloatListField()
    # validation
    dedup_threshold = serializers.FloatField()
    abs_dedup = serializers.BooleanField()
    dedup_candidates = serializers.BooleanField()
    # gateway
    llm_endpoint = serializers.CharField(allow_blank=True)
    llm_model = serializers.CharField()
    llm_token_env = serializers.CharField()
    llm_temperature = serializers.FloatField(min_value=0.0)
    llm_max_tokens = serializers.IntegerField(min_value=1)
    llm_timeout = serializers.FloatField()
    llm_retries = serializers.IntegerField(min_value=0)
    llm_mode = serializers.ChoiceField(choices=["live", "record", "replay"])
    llm_replay_dir = serializers.CharField(allow_blank=True)

    def validate_epsilon(self, value):
        if value <= 0:
            raise serializers.ValidationError("must be positive")
        return value

    def validate_costeer_delta(self, value):
        if value <= 0:
            raise serializers.ValidationError("must be positive")
        return value

    def validate_bandit_tau(self, value):
        if value <= 0:
            raise serializers.ValidationError("must be positive")
        return value

    def validate_bandit_sigma(self, value):
        if value <= 0:
            raise serializers.ValidationError("must be positive")
        return value

    def validate_dedup_threshold(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError("must lie in (0, 1]")
        return value

    def validate_llm_timeout(self, value):
        if value <= 0:
            raise serializers.ValidationError("must be positive")
        return value

    def validate_reward_weights(self, value):
        if value and len(value) != 8:
            raise serializers.ValidationError("exactly 8 weights are required")
        return value

    def validate(self, attrs):
        train, valid = attrs["train_fraction"], attrs["valid_fraction"]
        if not (0 < train < 1 and 0 < valid < 1 and train + valid < 1):
            raise serializers.ValidationError(
                {"train_fraction": "train and valid fractions must be positive and sum below 1"}
            )
        return attrs


# -- gateway replies ------------------------------------------------------------------


class FactorTaskReplySerializer(serializers.Serializer):
    """One factor task of a generated hypothesis; the formula must parse"""
    name = serializers.RegexField(r"^[A-Za-z_][A-Za-z0-9_]*$", max_length=64)
    description = serializers.CharField()
    formula = serializers.CharField()

    def validate_formula(self, value):
        try:
            parse(value)
        except DslError as exc:
            raise serializers.ValidationError(str(exc))
        return value


class ModelTaskReplySerializer(serializers.Serializer):
    description = serializers.CharField()
    feature_transform = serializers.ChoiceField(choices=["none", "zscore"])
    lookback = serializers.IntegerField(min_value=1, max_value=60)
    ridge_grid = FloatListField(allow_empty=False)

    def validate_ridge_grid(self, value):
        if any(v < 0 for v in value):
            raise serializers.ValidationError("ridge values must be non-negative")
        return value


class HypothesisReplySerializer(serializers.Serializer):
    """Hypothesis reply: statement, rationale and the tasks that implement it"""
    action = serializers.ChoiceField(choices=["factor", "model"])
    hypothesis = serializers.CharField()
    reason = serializers.CharField()
    factors = FactorTaskReplySerializer(many=True, required=False)
    model = ModelTaskReplySerializer(required=False)

    def validate_factors(self, value):
        names = [item["name"] for item in value]
        if len(set(names)) != len(names):
            raise serializers.ValidationError("factor names must be unique")
        return value

    def validate(self, attrs):
        if attrs["action"] == "factor":
            factors = attrs.get("factors") or []
            if not 1 <= len(factors) <= 5:
                raise serializers.ValidationError({"factors": "between 1 and 5 factors are required"})
        elif "model" not in attrs:
            raise serializers.ValidationError({"model": "a model hypothesis needs one model task"})
        return attrs


class FactorImplementationReplySerializer(serializers.Serializer):
    formula = serializers.CharField()

    def validate_formula(self, value):
        try:
            parse(value)
        except DslError as exc:
            raise serializers.ValidationError(str(exc))
        return value


class ActionReplySerializer(serializers.Serializer):
    action = serializers.ChoiceField(choices=["factor", "model"])
    reason = serializers.CharField(required=False, allow_blank=True)


REPLY_SCHEMAS = {
    "hypothesis": HypothesisReplySerializer,
    "factor_implementation": FactorImplementationReplySerializer,
    "action": ActionReplySerializer,
}
