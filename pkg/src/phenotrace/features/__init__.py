"""Daily feature extraction, cumulative-median aggregation and normalisation."""

from .dataset import (
    Dataset,
    DayFeatureRow,
    NormStats,
    apply_norm,
    build_dataset,
    correlation_matrix,
    cumulative_median,
    fit_norm,
    read_features_csv,
    write_features_csv,
)
from .extractors import (
    ambient_light_features,
    app_usage_features,
    battery_features,
    brightness_features,
    night_partition,
    noise_features,
    self_app_features,
    stat_block,
    step_features,
)
from .mobility import (
    haversine,
    home_features,
    infer_home,
    location_day_features,
    location_entropy,
    radius_of_gyration,
)
from .registry import (
    APP_CATEGORIES,
    SENSOR_GROUPS,
    ExtractionConfig,
    FeatureRegistry,
    FeatureSpec,
    default_registry,
)
