from .extreme_subset import ExtremeSubset, ExtremeSubsetMetrics, extreme_subset_metrics
from .heatmap import read_ppm, render_heatmap
from .histogram import Histogram, bias_histogram
from .report import (
    EvaluationConfig,
    EvaluationResult,
    compare_report,
    evaluate_predictions,
    load_report,
    write_report,
)
from .station_rmse import StationRMSE, rmse_at_stations
