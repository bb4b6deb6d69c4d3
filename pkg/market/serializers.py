from rest_framework import serializers

from .dsl import parse
from .exceptions import DslError


class FactorFormulaSerializer(serializers.Serializer):
    """One {name, formula} entry of a factor library file"""
    name = serializers.RegexField(r"^[A-Za-z_][A-Za-z0-9_]*$", max_length=64)
    formula = serializers.CharField()

    def validate(self, attrs):
        try:
            attrs["expr"] = parse(attrs["formula"])
        except DslError as exc:
            raise serializers.ValidationError({"formula": str(exc)})
        return attrs


class LinearModelSerializer(serializers.Serializer):
    """Fitted linear model as {feature_names, weights, intercept, ridge_lambda}"""
    feature_names = serializers.ListField(child=serializers.CharField(), allow_empty=True)
    weights = serializers.ListField(child=serializers.FloatField(), allow_empty=True)
    intercept = serializers.FloatField()
    ridge_lambda = serializers.FloatField(min_value=0.0)

    def validate(self, attrs):
        if len(attrs["weights"]) != len(attrs["feature_names"]):
            raise serializers.ValidationError("one weight per feature name is required")
        return attrs


class ModelSpecSerializer(serializers.Serializer):
    feature_transform = serializers.ChoiceField(choices=["none", "zscore"])
    ridge_grid = serializers.ListField(
        child=serializers.FloatField(min_value=0.0), allow_empty=False
    )
    lookback = serializers.IntegerField(min_value=1)


class StrategyConfigSerializer(serializers.Serializer):
    topk = serializers.IntegerField(min_value=1)
    n_drop = serializers.IntegerField(min_value=0)
    buy_cost = serializers.FloatField(min_value=0.0, max_value=0.999999)
    sell_cost = serializers.FloatField(min_value=0.0, max_value=0.999999)
    min_fee = serializers.FloatField(min_value=0.0)
    price_limit = serializers.FloatField(min_value=0.0, allow_null=True)
    initial_cash = serializers.FloatField()
    retention_rank = serializers.IntegerField(min_value=1, allow_null=True, required=False)

    def validate_initial_cash(self, value):
        if value <= 0:
            raise serializers.ValidationError("initial_cash must be positive")
        return value

    def validate(self, attrs):
        if not attrs["topk"] > attrs["n_drop"]:
            raise serializers.ValidationError("topk must exceed n_drop")
        return attrs


class TradeSerializer(serializers.Serializer):
    date = serializers.DateField()
    instrument = serializers.CharField()
    side = serializers.ChoiceField(choices=["buy", "sell"])
    shares = serializers.FloatField()
    price = serializers.FloatField()
    fee = serializers.FloatField()
