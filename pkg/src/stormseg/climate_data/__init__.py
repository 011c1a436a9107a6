"""Dataset container, channel catalogue, splits, statistics and synthetic data."""
from .dataset import (
    PAPER_TEST_YEARS,
    PAPER_TRAIN_YEARS,
    PAPER_VAL_YEARS,
    ClassFrequencies,
    Dataset,
    DatasetManifest,
    SampleRecord,
    class_frequencies,
    compute_class_weights,
    compute_normalization_stats,
    load_manifest,
    roll_longitude,
    save_manifest,
    split_arrays,
    split_by_year,
    standardize,
    write_dataset,
)
from .sample import (
    ALL_CHANNELS,
    BASELINE_CHANNELS,
    CHANNEL_CATALOG,
    ENGINEERED_CHANNELS,
    ClimateSample,
    GridGeometry,
)
from .synthetic import SyntheticConfig, SyntheticOverlapError, gen_synthetic_dataset
from .tensorfile import (
    BadMagicError,
    TensorFileError,
    TruncatedFileError,
    UnknownDtypeError,
    read_tensor_file,
    write_tensor_file,
)
