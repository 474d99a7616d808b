from .beam import (
    BeamHypothesis,
    DecodeConfig,
    DecodeStats,
    DecodeSummary,
    decode_stats_summary,
    knn_beam_decode,
    select_candidates,
)
from .model import BOS, EOS, PAD, UNK, BaseModel, EncodedSource, StubModel, Vocab, stub_encode, stub_step, target_order
