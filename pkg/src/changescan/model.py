"""The full change detector: shared encoder, fusion, flow-guided decoder.

Both images run through one encoder instance (shared parameters), each
stage's feature pair is fused twice (spatial interleave for the change
feature, channel concat for the lateral), and the decoder folds the
pyramid into a two-class probability map at input resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .decoder import Decoder
from .encoder import Encoder, EncoderConfig
from .fusion import StcBlock, ccf
from .tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_width: int = 32
    stc_depth: int = 1
    use_flow: bool = True
    use_2ds: bool = True

    def __post_init__(self):
        if self.decoder_width < 1:
            raise ValueError("decoder width must be >= 1")
        if self.stc_depth < 1:
            raise ValueError("stc depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        enc = dict(d.pop("encoder"))
        enc["stage_depths"] = tuple(enc["stage_depths"])
        return ModelConfig(encoder=EncoderConfig(**enc), **d)


class ChangeDetector:
    """Siamese encoder + per-stage change features + flow decoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        # the ablation switch on the model wins over the nested field
        enc_cfg = replace(cfg.encoder, scan_2d=cfg.use_2ds)
        self.encoder = Encoder(enc_cfg, rng)
        chans = [enc_cfg.stage_channels(s) for s in (1, 2, 3, 4)]
        self.stc = [StcBlock(ch, enc_cfg, rng, n_blocks=cfg.stc_depth)
                    for ch in chans]
        self.decoder = Decoder(chans, cfg.decoder_width, rng,
                               use_flow=cfg.use_flow)

    def __call__(self, img1: Tensor, img2: Tensor, parallel: bool = True,
                 strict: bool = True):
        """(3,H,W) pair -> ((2,H,W) probabilities, flow fields)."""
        f1s = self.encoder.encode(img1, "T1", parallel=parallel,
                                  strict=strict)
        f2s = self.encoder.encode(img2, "T2", parallel=parallel,
                                  strict=strict)
        change = [self.stc[s](f1s[s], f2s[s], parallel=parallel)
                  for s in range(4)]
        laterals = [ccf(f1s[s], f2s[s]) for s in range(4)]
        return self.decoder(change, laterals, (img1, img2))

    def named_parameters(self):
        named = self.encoder.named_tensors("encoder.")
        for s, blk in enumerate(self.stc):
            named += blk.named_tensors(f"stc{s + 1}.")
        named += self.decoder.named_tensors("decoder.")
        return named


def build_model(cfg: ModelConfig, seed: int) -> ChangeDetector:
    """Construct with all weights drawn from one seeded generator."""
    return ChangeDetector(cfg, np.random.default_rng(seed))
