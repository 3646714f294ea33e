"""Command-line entry point: ``conmamba <command> --out DIR [--config FILE]``.

Anything that affects results lives in a JSON run config; flags only name
paths and verbosity. Each command writes a snapshot of its resolved config
into the output directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import ConfigError, DataError, InputError, NumericError
from .data import MixSpec, load_manifest, make_toy_corpus, mix, write_manifest
from .frontend import FrontendConfig
from .metrics import render_table, score
from .model import PRESET_NAMES, ModelConfig, describe
from .pipeline import extract_features, recognize
from .ssm import selective_scan_core
from .tokenizer import build_vocab
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("conmamba_asr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class SearchConfig:
    beam_size: int = 8
    length_penalty_alpha: float = 0.6
    max_len: int = 200

    def __post_init__(self):
        if self.beam_size < 1 or self.max_len < 1:
            raise ConfigError("search.beam_size and search.max_len must be >= 1")


@dataclass
class DataConfig:
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    missing_audio: str = "warn"

    def __post_init__(self):
        if self.missing_audio not in ("warn", "fail", "ignore"):
            raise ConfigError("data.missing_audio must be warn, fail or ignore")


@dataclass
class ToyConfig:
    n_utts: int = 200
    seed: int = 0
    n_other: int | None = None


@dataclass
class MixConfig:
    sources: list = field(default_factory=list)  # [{"manifest": path, "weight": float | null}]
    num_draws: int = 0
    seed: int = 0
    name: str = "mixed"


@dataclass
class BenchConfig:
    lengths: list = field(default_factory=lambda: [1024, 2048, 4096, 8192, 16384])
    d_inner: int = 16
    d_state: int = 16
    repeats: int = 3
    block: int = 1024
    seed: int = 0


@dataclass
class ModelSection:
    """Preset (defaults to ``train.preset``) plus per-field encoder/decoder overrides."""

    preset: str | None = None
    d_state: int | None = None
    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.preset is not None and self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESET_NAMES)}")

    def build(self, train: TrainConfig, vocab_size: int, n_mels: int) -> ModelConfig:
        overrides = {"dropout": train.dropout}
        if self.d_state is not None:
            overrides["d_state"] = self.d_state
        base = ModelConfig.from_preset(self.preset or train.preset, vocab_size, n_mels, **overrides).to_dict()
        base["encoder"].update(self.encoder)
        base["decoder"].update(self.decoder)
        return ModelConfig.from_dict(base)


_SECTIONS = {"frontend": FrontendConfig, "model": ModelSection, "train": TrainConfig, "search": SearchConfig,
             "data": DataConfig, "toy": ToyConfig, "mix": MixConfig, "bench": BenchConfig}


@dataclass
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    toy: ToyConfig | None = None
    mix: MixConfig | None = None
    bench: BenchConfig = field(default_factory=BenchConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, kind in _SECTIONS.items():
            if name in d:
                values = d[name]
                if not isinstance(values, dict):
                    raise ConfigError(f"config section {name!r} must be an object")
                names = {f.name for f in fields(kind)}
                bad = set(values) - names
                if bad:
                    raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
                try:
                    built[name] = kind(**values)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"invalid {name!r} section: {e}") from None
        return cls(**built, base_dir=base_dir)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            value = getattr(self, name)
            if value is not None:
                out[name] = asdict(value)
        return out

    def path(self, p: str | None, what: str) -> Path:
        if not p:
            raise ConfigError(f"config is missing data.{what}")
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def _snapshot(cfg: RunConfig, out: Path, command: str, extra: dict | None = None) -> None:
    doc = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    (out / f"run_config.{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare_data(cfg: RunConfig, out: Path, args) -> int:
    wrote = []
    toy = cfg.toy or (ToyConfig() if args.toy else None)
    if toy is not None:
        manifests = make_toy_corpus(out, toy.n_utts, toy.seed, toy.n_other)
        wrote += [f"{name}.tsv ({len(m)} entries)" for name, m in manifests.items()]
    if cfg.mix is not None:
        sources = []
        for s in cfg.mix.sources:
            if set(s) - {"manifest", "weight"} or "manifest" not in s:
                raise ConfigError("mix.sources entries need 'manifest' and optional 'weight'")
            sources.append((load_manifest(cfg.path(s["manifest"], "mix.sources"), cfg.data.missing_audio),
                            s.get("weight")))
        mixed = mix(MixSpec(sources, cfg.mix.num_draws, cfg.mix.seed))
        write_manifest(out / f"{cfg.mix.name}.tsv", mixed)
        wrote.append(f"{cfg.mix.name}.tsv ({len(mixed)} entries)")
    if not wrote:
        raise ConfigError("nothing to prepare: pass --toy or give a 'toy' or 'mix' config section")
    if toy is not None and cfg.toy is None:
        cfg.toy = toy
    _snapshot(cfg, out, "prepare-data")
    for w in wrote:
        print(f"wrote {out / w}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    train_entries = load_manifest(cfg.path(cfg.data.train, "train"), cfg.data.missing_audio)
    dev_entries = load_manifest(cfg.path(cfg.data.dev, "dev"), cfg.data.missing_audio) if cfg.data.dev else []
    vocab = build_vocab(train_entries)
    model_cfg = cfg.model.build(cfg.train, len(vocab), cfg.frontend.n_mels)
    _snapshot(cfg, out, "train")
    res = train(cfg.train, train_entries, dev_entries, vocab, out, model_cfg=model_cfg,
                frontend=cfg.frontend, snapshot={"run": cfg.to_dict()})
    print(f"trained {cfg.train.epochs} epochs in {res.seconds:.1f}s; checkpoints in {res.best_dir} and {res.final_dir}")
    return EXIT_OK


def _decode(cfg: RunConfig, checkpoint: Path, entries, mode: str):
    model, vocab, stats, snap = load_checkpoint(checkpoint)
    frontend = FrontendConfig(**snap["frontend"]) if "frontend" in snap else cfg.frontend
    feats = extract_features(entries, frontend)
    s = cfg.search
    return recognize(model, vocab, feats, stats, entries, mode, s.beam_size, s.length_penalty_alpha, s.max_len)


def _write_hyps(path: Path, results) -> None:
    lines = [f"{utt}\t{text}\t{hyp.log_prob:.6f}" for utt, text, hyp in results]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def cmd_decode(cfg: RunConfig, out: Path, args) -> int:
    entries = load_manifest(args.manifest, cfg.data.missing_audio)
    _snapshot(cfg, out, "decode", {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
                                   "mode": args.mode})
    results = _decode(cfg, Path(args.checkpoint), entries, args.mode)
    path = out / f"hyps.{args.mode}.txt"
    _write_hyps(path, results)
    print(f"decoded {len(results)} utterances -> {path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    entries = load_manifest(args.manifest, cfg.data.missing_audio)
    _snapshot(cfg, out, "evaluate", {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)})
    report = None
    for mode in ("greedy", "beam"):
        results = _decode(cfg, Path(args.checkpoint), entries, mode)
        _write_hyps(out / f"hyps.{mode}.txt", results)
        part = score(entries, {u: text for u, text, _ in results}, mode)
        report = part if report is None else report.merge(part)
    text, csv_text = render_table(report)
    (out / "results.txt").write_text(text)
    (out / "results.csv").write_text(csv_text)
    print(text, end="")
    return EXIT_OK


def _time_call(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def attention_reference(q, k, v, block: int = 1024):
    """Full (non-causal) softmax attention computed in query blocks: O(T^2) work."""
    scale = q.shape[-1] ** -0.5
    out = torch.empty_like(v)
    for i in range(0, q.shape[0], block):
        w = torch.softmax((q[i:i + block] @ k.T) * scale, dim=-1)
        out[i:i + block] = w @ v
    return out


def fit_slope(lengths, seconds) -> float:
    """Least-squares slope of log(seconds) against log(T)."""
    return float(np.polyfit(np.log(lengths), np.log(seconds), 1)[0])


def bench_scan(bench: BenchConfig) -> tuple[list[dict], float, float]:
    torch.set_grad_enabled(False)
    g = torch.Generator().manual_seed(bench.seed)
    d, n = bench.d_inner, bench.d_state
    A = -torch.rand(d, n, generator=g) - 0.5
    Dskip = torch.randn(d, generator=g)
    rows = []
    try:
        for T in bench.lengths:
            x = torch.randn(1, T, d, generator=g)
            delta = torch.rand(1, T, d, generator=g) * 0.1
            Bm, Cm = torch.randn(1, T, n, generator=g), torch.randn(1, T, n, generator=g)
            q, k, v = (torch.randn(T, d, generator=g) for _ in range(3))
            scan_s = _time_call(lambda: selective_scan_core(x, delta, A, Bm, Cm, Dskip, mode="parallel"),
                                bench.repeats)
            attn_s = _time_call(lambda: attention_reference(q, k, v, bench.block), bench.repeats)
            rows.append({"T": T, "scan_seconds": scan_s, "attention_seconds": attn_s})
            log.info("T=%d scan %.4fs attention %.4fs", T, scan_s, attn_s)
    finally:
        torch.set_grad_enabled(True)
    Ts = [r["T"] for r in rows]
    return rows, fit_slope(Ts, [r["scan_seconds"] for r in rows]), \
        fit_slope(Ts, [r["attention_seconds"] for r in rows])


def cmd_bench_scan(cfg: RunConfig, out: Path, args) -> int:
    if len(cfg.bench.lengths) < 2 or min(cfg.bench.lengths) < 1:
        raise ConfigError("bench.lengths needs at least two positive lengths")
    _snapshot(cfg, out, "bench-scan")
    rows, scan_slope, attn_slope = bench_scan(cfg.bench)
    with open(out / "bench_scan.csv", "w") as f:
        f.write("T,scan_seconds,attention_seconds\n")
        for r in rows:
            f.write(f"{r['T']},{r['scan_seconds']:.6g},{r['attention_seconds']:.6g}\n")
    summary = {"scan_slope": scan_slope, "attention_slope": attn_slope, "rows": rows}
    (out / "bench_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"parallel scan log-log slope {scan_slope:.3f}; attention reference slope {attn_slope:.3f}")
    return EXIT_OK


def cmd_describe(cfg: RunConfig, out: Path, args) -> int:
    n_mels = cfg.frontend.n_mels
    reports = {name: describe(ModelConfig.from_preset(name, n_mels=n_mels))
               for name in ("Ver1", "Ver2", "Ver1-small", "Ver2-small")}
    configured = cfg.model.build(cfg.train, 32, n_mels)
    reports["configured"] = describe(configured, cfg.frontend.frame_rate)
    keys = ("encoder_layers", "decoder_layers", "attention_heads", "d_model")
    diff = {k: [reports["Ver1"][k], reports["Ver2"][k]] for k in keys if reports["Ver1"][k] != reports["Ver2"][k]}
    diff["params_decoder"] = [reports["Ver1"]["params_decoder"], reports["Ver2"]["params_decoder"]]
    doc = {"presets": reports, "ver1_vs_ver2": diff}
    _snapshot(cfg, out, "describe")
    (out / "describe.json").write_text(json.dumps(doc, indent=2) + "\n")
    head = f"{'preset':<12}{'enc':>5}{'dec':>5}{'heads':>7}{'d_model':>9}{'enc params':>13}{'dec params':>13}"
    print(head)
    for name, r in reports.items():
        print(f"{name:<12}{r['encoder_layers']:>5}{r['decoder_layers']:>5}{r['attention_heads']:>7}"
              f"{r['d_model']:>9}{r['params_encoder']:>13,}{r['params_decoder']:>13,}")
    rate = reports["configured"]["frame_rate_chain"]
    frames = reports["configured"]["frames_for_1s"]
    print(f"frame rate chain (Hz): {' -> '.join(f'{x:g}' for x in rate)}; 1 s: {' -> '.join(map(str, frames))} frames")
    print("Ver1 vs Ver2: " + "; ".join(f"{k} {a} vs {b}" for k, (a, b) in diff.items()))
    return EXIT_OK


COMMANDS = {"prepare-data": cmd_prepare_data, "train": cmd_train, "decode": cmd_decode,
            "evaluate": cmd_evaluate, "bench-scan": cmd_bench_scan, "describe": cmd_describe}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conmamba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, type=Path, help="output directory (created if missing)")
        p.add_argument("--config", type=Path, help="JSON run config")
        if name == "prepare-data":
            p.add_argument("--toy", action="store_true", help="generate the toy corpus with default settings")
        if name in ("decode", "evaluate"):
            p.add_argument("--checkpoint", required=True, type=Path)
            p.add_argument("--manifest", required=True, type=Path)
        if name == "decode":
            p.add_argument("--mode", choices=("greedy", "beam"), default="beam")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, InputError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
