from .dataset import PersonSample, ReidDataset, concat_datasets
from .reid_dir import load_market_layout, load_reid_directory, parse_filename, write_reid_directory
from .sampler import PairBatch, PairSampler, sample_pair_batch
from .synthetic import SynthSpec, generate_heldout_split, generate_synthetic_dataset

__all__ = [
    "PersonSample", "ReidDataset", "concat_datasets",
    "load_market_layout", "load_reid_directory", "parse_filename", "write_reid_directory",
    "PairBatch", "PairSampler", "sample_pair_batch",
    "SynthSpec", "generate_heldout_split", "generate_synthetic_dataset",
]
