"""Neural Open IE: tagged-sequence tuple extraction with a numpy encoder-decoder.

The submodules map onto the pipeline:

- ``numeric``: tensors, LSTM cells, attention, softmax, gradient checking
- ``text``: tokenizer, vocabulary, tagged-tuple codec, bootstrap filter, synthetic corpus
- ``model``: encoder, attention, copy-aware decode step, sequence scoring
- ``training``: SGD schedule, shard sampling, checkpoints
- ``inference``: greedy and beam decoding, extraction
- ``evaluation``: lexical matching, P-R curves, AUC, reports
"""

from .evaluation import GoldExtraction, MatchConfig, auc, evaluate, lexical_match, pr_curve, score_corpus
from .inference import BeamConfig, Extraction, Extractor, beam_search, extract_corpus, extract_sentence, greedy_decode
from .model import ModelConfig, ModelParams, attend, bridge, decode_step, encode, sequence_logprob
from .text import TuplePair, Vocabulary, build_vocab, encode_tuple, filter_pair, gen_synthetic, parse_tagged, tokenize
from .training import TrainConfig, desk_configs, load_checkpoint, lr_schedule, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BeamConfig", "Extraction", "Extractor", "GoldExtraction", "MatchConfig", "ModelConfig", "ModelParams",
    "TrainConfig", "TuplePair", "Vocabulary", "attend", "auc", "beam_search", "bridge", "build_vocab",
    "decode_step", "desk_configs", "encode", "encode_tuple", "evaluate", "extract_corpus", "extract_sentence",
    "filter_pair", "gen_synthetic", "greedy_decode", "lexical_match", "load_checkpoint", "lr_schedule",
    "parse_tagged", "pr_curve", "save_checkpoint", "score_corpus", "sequence_logprob", "tokenize", "train",
]
