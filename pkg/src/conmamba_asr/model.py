"""Full recognizer and the named architecture presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import torch
import torch.nn as nn

from . import ConfigError
from .decoder import DecoderConfig, MambaDecoder
from .encoder import ConMambaEncoder, EncodedSequence, EncoderConfig, subsampled_length

# Paper-shaped presets differ only in the decoder (layers, heads); the "-small"
# variants shrink d_model for CPU-scale runs and keep every count.
_PRESETS = {
    "Ver1": dict(d_model=256, d_ff=1024, enc_layers=12, dec_layers=4, heads=4),
    "Ver2": dict(d_model=256, d_ff=1024, enc_layers=12, dec_layers=6, heads=8),
    "Ver1-small": dict(d_model=144, d_ff=576, enc_layers=12, dec_layers=4, heads=4),
    "Ver2-small": dict(d_model=144, d_ff=576, enc_layers=12, dec_layers=6, heads=8),
}
PRESET_NAMES = tuple(_PRESETS)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    preset: str = "custom"

    @classmethod
    def from_preset(cls, name: str, vocab_size: int = 32, n_mels: int = 80, **overrides) -> "ModelConfig":
        if name not in _PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
        p = {**_PRESETS[name], **overrides}
        d_state = p.get("d_state", 16)
        dropout = p.get("dropout", 0.1)
        enc = EncoderConfig(num_layers=p["enc_layers"], d_model=p["d_model"], d_ff=p["d_ff"],
                            n_mels=n_mels, d_state=d_state, dropout=dropout)
        dec = DecoderConfig(num_layers=p["dec_layers"], num_heads=p["heads"], d_model=p["d_model"],
                            d_ff=p["d_ff"], vocab_size=vocab_size, d_state=d_state, dropout=dropout)
        return cls(enc, dec, name)

    def to_dict(self) -> dict:
        return {"preset": self.preset, "encoder": asdict(self.encoder), "decoder": asdict(self.decoder)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {"preset", "encoder", "decoder"}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(_strict(EncoderConfig, d.get("encoder", {})),
                   _strict(DecoderConfig, d.get("decoder", {})), d.get("preset", "custom"))

    def with_vocab(self, vocab_size: int) -> "ModelConfig":
        return replace(self, decoder=replace(self.decoder, vocab_size=vocab_size))


def _strict(kind, values: dict):
    names = {f.name for f in fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**values)


class ASRModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.encoder.d_model != cfg.decoder.d_model:
            raise ConfigError("encoder and decoder d_model must match")
        self.cfg = cfg
        self.encoder = ConMambaEncoder(cfg.encoder)
        self.decoder = MambaDecoder(cfg.decoder)

    def encode(self, feats, lengths=None) -> EncodedSequence:
        return self.encoder(feats, lengths)

    def forward(self, feats, lengths, tokens):
        return self.decoder(tokens, self.encode(feats, lengths))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def describe(cfg: ModelConfig, frame_rate: float = 100.0) -> dict:
    """Parameter counts and shape facts for a configuration."""
    torch.manual_seed(0)
    model = ASRModel(cfg)
    return {
        "preset": cfg.preset,
        "encoder_layers": cfg.encoder.num_layers,
        "decoder_layers": cfg.decoder.num_layers,
        "attention_heads": cfg.decoder.num_heads,
        "d_model": cfg.encoder.d_model,
        "d_state": cfg.encoder.d_state,
        "vocab_size": cfg.decoder.vocab_size,
        "params_encoder": count_parameters(model.encoder),
        "params_decoder": count_parameters(model.decoder),
        "params_total": count_parameters(model),
        "frame_rate_chain": [frame_rate, frame_rate / 2, frame_rate / 4],
        "frames_for_1s": [98, 98 // 2, subsampled_length(98)],
    }
