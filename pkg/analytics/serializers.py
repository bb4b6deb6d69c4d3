from rest_framework import serializers


class MetricsBundleSerializer(serializers.Serializer):
    """The eight evaluation metrics; undefined values travel as null"""
    ic = serializers.FloatField(allow_null=True)
    icir = serializers.FloatField(allow_null=True)
    rank_ic = serializers.FloatField(allow_null=True)
    rank_icir = serializers.FloatField(allow_null=True)
    arr = serializers.FloatField(allow_null=True)
    ir = serializers.FloatField(allow_null=True)
    mdd = serializers.FloatField(allow_null=True, max_value=0.0)
    calmar = serializers.FloatField(allow_null=True)


class TimeSeriesDataSerializer(serializers.Serializer):
    """One dated point of a daily series"""
    date = serializers.DateField()
    value = serializers.FloatField(allow_null=True)


class YearlyICSerializer(serializers.Serializer):
    """IC summary of one calendar year"""
    year = serializers.IntegerField()
    n_days = serializers.IntegerField(min_value=0)
    ic = serializers.FloatField(allow_null=True)
    icir = serializers.FloatField(allow_null=True)
    rank_ic = serializers.FloatField(allow_null=True)
    rank_icir = serializers.FloatField(allow_null=True)


class AttemptCurvePointSerializer(serializers.Serializer):
    """Share of implementation tasks solved within k attempts"""
    k = serializers.IntegerField(min_value=1)
    solved_share = serializers.FloatField(min_value=0.0, max_value=1.0)
