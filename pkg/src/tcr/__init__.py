"""Multimodal title and cover generation with attention-based data refinement."""
from .data import DatasetManifest, Sample, SynthSpec, load_manifest, synth_dataset, write_manifest
from .decoding import AttentionPolicy, beam_decode, generate, greedy_decode, select_cover
from .metrics import evaluate_titles, lead3, rouge_l, rouge_n
from .model import ModelConfig, TitleCoverGenerator
from .refinement import RefinementConfig, refine_loop
from .tokenization import Vocab, build_vocab, decode, encode
from .training import TrainSchedule, train

__version__ = "0.1.0"

__all__ = [
    "AttentionPolicy",
    "DatasetManifest",
    "ModelConfig",
    "RefinementConfig",
    "Sample",
    "SynthSpec",
    "TitleCoverGenerator",
    "TrainSchedule",
    "Vocab",
    "beam_decode",
    "build_vocab",
    "decode",
    "encode",
    "evaluate_titles",
    "generate",
    "greedy_decode",
    "lead3",
    "load_manifest",
    "refine_loop",
    "rouge_l",
    "rouge_n",
    "select_cover",
    "synth_dataset",
    "train",
    "write_manifest",
]
