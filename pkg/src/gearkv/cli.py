"""Command-line front end.

Commands::

    gearkv gen      --out DIR                 synthetic K/V/q tensors (KVT1 files)
    gearkv compress [--in DIR] [--out CSV]    one error row per role
    gearkv sweep    --bits 2,4,8 --rank-prefill 0,4 ...
    gearkv deviate  --steps 64                per-step attention deviation traces
    gearkv account  --preset kcvt4-gsm8k      KV-size breakdown

Settings resolve as flags > ``--config`` JSON file > ``--preset`` > defaults;
the seed falls back to ``$GEARKV_SEED`` and then 0.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gearkv.accounting import account, account_state
from gearkv.attention import SyntheticKVSpec, generate_synthetic_kv, run_deviation
from gearkv.cache import append_token, materialize, prefill
from gearkv.gear import KEY, VALUE, ConfigError, FlushThresholdError, GearConfig, compress_block, error_report
from gearkv.presets import BACKBONES, PRESETS, backbone_config, get_preset
from gearkv.report import render_csv
from gearkv.tensor import HeadLayout, TensorFormatError, frobenius_error, load_tensor, save_tensor

COMMANDS = ("gen", "compress", "sweep", "deviate", "account")
TENSOR_FILES = {"keys": "keys.kvt", "values": "values.kvt", "queries": "queries.kvt"}
SWEEP_AXES = ("bits", "sparsity", "rank_prefill", "rank_decode", "coverage_p", "buffer")
VARIANTS = ("pass", "backbone", "gear-l", "gear")

DEFAULTS = {
    "bits": 2, "sparsity": 2.0, "rank_prefill": 4, "rank_decode": 2, "buffer": 64,
    "backbone": "kivi-g64", "coverage_p": 100.0, "iters": 2, "seed": None,
    "n": 512, "d": 256, "heads": 2, "outlier_channels": 4, "outlier_scale": 16.0, "rho": 0.9,
    "latent_rank": 8, "steps": 64, "decode_tokens": 0, "variants": ",".join(VARIANTS),
    "n_prefill": 900, "n_gen": 256, "buffer_fraction": 1.0, "index_bits": 16, "format": "csv",
}
INT_KEYS = {"bits", "rank_prefill", "rank_decode", "buffer", "iters", "seed", "n", "d", "heads",
            "outlier_channels", "latent_rank", "steps", "decode_tokens", "n_prefill", "n_gen", "index_bits"}
FLOAT_KEYS = {"sparsity", "coverage_p", "outlier_scale", "rho", "buffer_fraction"}


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunConfig:
    command: str
    settings: dict = field(default_factory=dict)
    preset: str | None = None
    in_path: str | None = None
    out_path: str | None = None

    def value(self, key: str):
        v = self.settings[key]
        if isinstance(v, list):
            if self.command != "sweep" or key not in SWEEP_AXES:
                if len(v) != 1:
                    raise CLIError("config", f"{key} takes a single value for {self.command}")
                return v[0]
        return v

    def axis(self, key: str) -> list:
        v = self.settings[key]
        out = v if isinstance(v, list) else [v]
        if not out:
            raise CLIError("config", f"sweep axis {key} is empty")
        return out

    @property
    def seed(self) -> int:
        return int(self.value("seed"))

    def cfg_id(self) -> str:
        return self.preset or "custom"

    def gear_config(self, **overrides) -> GearConfig:
        s = {k: self.value(k) for k in ("bits", "sparsity", "rank_prefill", "rank_decode", "buffer",
                                        "coverage_p", "iters", "backbone")}
        s.update(overrides)
        try:
            cfg = backbone_config(
                s["backbone"], bits=int(s["bits"]), sparsity=float(s["sparsity"]),
                rank_prefill=int(s["rank_prefill"]), rank_decode=int(s["rank_decode"]),
                buffer_size=int(s["buffer"]), coverage=float(s["coverage_p"]),
                iters=int(s["iters"]), seed=self.seed,
            )
        except ValueError as exc:
            raise CLIError("config", str(exc)) from None
        return cfg.validate()

    def synthetic_spec(self) -> SyntheticKVSpec:
        try:
            return SyntheticKVSpec(
                n=int(self.value("n")), d=int(self.value("d")), heads=int(self.value("heads")),
                seed=self.seed, outlier_channel_count=int(self.value("outlier_channels")),
                outlier_scale=float(self.value("outlier_scale")), token_correlation=float(self.value("rho")),
                latent_rank=int(self.value("latent_rank")),
            )
        except ValueError as exc:
            raise CLIError("config", str(exc)) from None


def _preset_settings(name: str, command: str) -> dict:
    p = get_preset(name)
    cfg = p.config()
    backbone = next(k for k, v in BACKBONES.items() if v == (cfg.key_scheme, cfg.value_scheme))
    out = {"bits": cfg.bits, "sparsity": cfg.sparsity, "rank_prefill": cfg.rank_prefill,
           "rank_decode": cfg.rank_decode, "buffer": cfg.buffer_size, "backbone": backbone}
    if command == "account":
        out.update(n_prefill=p.n_prefill, n_gen=p.n_gen, d=p.d, heads=p.heads)
    return out


def _coerce(key: str, raw):
    def one(x):
        if key in INT_KEYS:
            return int(x)
        if key in FLOAT_KEYS:
            return float(x)
        return x
    if isinstance(raw, list):
        return [one(x) for x in raw]
    if isinstance(raw, str) and key in SWEEP_AXES and "," in raw:
        return [one(x) for x in raw.split(",") if x.strip()]
    return one(raw)


def resolve(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    """Merge defaults, preset, config file and flags into one RunConfig."""
    file_settings = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_settings = json.load(fh)
        except FileNotFoundError:
            raise CLIError("missing_file", f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise CLIError("config", f"bad config file: {exc}") from None
        if not isinstance(file_settings, dict):
            raise CLIError("config", "config file must hold a JSON object")
    preset = args.preset or file_settings.pop("preset", None)

    settings = dict(DEFAULTS)
    if preset:
        try:
            settings.update(_preset_settings(preset, args.command))
        except ValueError as exc:
            raise CLIError("config", str(exc)) from None
    for key, raw in file_settings.items():
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise CLIError("config", f"unknown config key {key!r}")
        settings[key] = raw
    for key in DEFAULTS:
        raw = getattr(args, key, None)
        if raw is not None:
            settings[key] = raw
    if settings["seed"] is None:
        settings["seed"] = environ.get("GEARKV_SEED", 0)
    try:
        settings = {k: _coerce(k, v) for k, v in settings.items()}
    except ValueError as exc:
        raise CLIError("config", f"bad numeric value: {exc}") from None
    return RunConfig(args.command, settings, preset, args.in_path, args.out)


# ---------------------------------------------------------------- commands

def _load_inputs(rc: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    if rc.in_path is None:
        k, v, _ = generate_synthetic_kv(rc.synthetic_spec())
        return k, v
    base = Path(rc.in_path)
    try:
        k = load_tensor(base / TENSOR_FILES["keys"])
        v = load_tensor(base / TENSOR_FILES["values"])
    except FileNotFoundError as exc:
        raise CLIError("missing_file", f"missing input tensor: {exc.filename}") from None
    if k.shape != v.shape:
        raise CLIError("shape", f"keys {k.shape} and values {v.shape} differ")
    return k, v


def _layout(rc: RunConfig, d: int) -> HeadLayout:
    try:
        return HeadLayout.for_width(d, int(rc.value("heads")))
    except ValueError as exc:
        raise CLIError("shape", str(exc)) from None


def cmd_gen(rc: RunConfig) -> str | None:
    if not rc.out_path:
        raise CLIError("config", "gen needs --out DIR")
    out = Path(rc.out_path)
    out.mkdir(parents=True, exist_ok=True)
    k, v, q = generate_synthetic_kv(rc.synthetic_spec())
    for name, arr in (("keys", k), ("values", v), ("queries", q)):
        save_tensor(arr, out / TENSOR_FILES[name])
    return None


def cmd_compress(rc: RunConfig) -> str:
    k, v = _load_inputs(rc)
    cfg = rc.gear_config()
    layout = _layout(rc, k.shape[1])
    rows = []
    for role, x in ((KEY, k), (VALUE, v)):
        block = compress_block(x, cfg, role, cfg.rank_prefill, layout, coverage=cfg.coverage)
        rows.append({
            "cfg_id": rc.cfg_id(), "role": role, "bits": cfg.bits, "sparsity": cfg.sparsity,
            "rank": cfg.rank_prefill, "backbone": rc.value("backbone"), "coverage_p": cfg.coverage,
            "rows": x.shape[0], "cols": x.shape[1], **error_report(x, block).as_dict(),
        })
    return render_csv("compress", rows)


def sweep_cell(k: np.ndarray, v: np.ndarray, cfg: GearConfig, layout: HeadLayout, decode_tokens: int) -> dict:
    n0 = k.shape[0] - decode_tokens
    state = prefill(k[:n0], v[:n0], cfg, layout)
    for t in range(n0, k.shape[0]):
        append_token(state, k[t], v[t])
    kh, vh = materialize(state)
    ek, ev = frobenius_error(k, kh), frobenius_error(v, vh)
    nk, nv = float(np.linalg.norm(k.astype(np.float64))), float(np.linalg.norm(v.astype(np.float64)))
    return {
        "key_relative": ek / nk if nk else 0.0,
        "value_relative": ev / nv if nv else 0.0,
        "relative": float(np.hypot(ek, ev) / np.hypot(nk, nv)) if nk or nv else 0.0,
        "kv_size_percent": account_state(state).percent_of_fp16,
    }


def cmd_sweep(rc: RunConfig) -> str:
    k, v = _load_inputs(rc)
    layout = _layout(rc, k.shape[1])
    decode_tokens = int(rc.value("decode_tokens"))
    if not 0 <= decode_tokens <= k.shape[0]:
        raise CLIError("config", f"decode_tokens {decode_tokens} outside [0, {k.shape[0]}]")
    axes = [rc.axis(name) for name in SWEEP_AXES]
    rows = []
    for cell in sorted(set(itertools.product(*axes))):
        overrides = dict(zip(SWEEP_AXES, cell))
        cfg = rc.gear_config(**overrides)
        rows.append({**overrides, "backbone": rc.value("backbone"),
                     **sweep_cell(k, v, cfg, layout, decode_tokens)})
    return render_csv("sweep", rows)


def variant_configs(base: GearConfig, names) -> dict[str, GearConfig]:
    table = {
        "pass": base.with_(bits=16, sparsity=0.0, rank_prefill=0, rank_decode=0),
        "backbone": base.with_(sparsity=0.0, rank_prefill=0, rank_decode=0),
        "gear-l": base.with_(sparsity=0.0),
        "gear": base,
    }
    out = {}
    for name in names:
        if name not in table:
            raise CLIError("config", f"unknown variant {name!r}; choose from {VARIANTS}")
        out[name] = table[name]
    return out


def cmd_deviate(rc: RunConfig) -> str:
    spec = rc.synthetic_spec()
    steps = int(rc.value("steps"))
    if not 1 <= steps <= spec.n:
        raise CLIError("config", f"steps must be in [1, n={spec.n}]")
    names = [x for x in str(rc.value("variants")).split(",") if x]
    traces = run_deviation(spec, variant_configs(rc.gear_config(), names), steps)
    rows = [row for name in names for row in traces[name].rows()]
    return render_csv("deviate", rows)


def cmd_account(rc: RunConfig) -> str:
    cfg = rc.gear_config()
    report = account(cfg, int(rc.value("n_prefill")), int(rc.value("n_gen")), int(rc.value("d")),
                     int(rc.value("heads")), buffer_fraction=float(rc.value("buffer_fraction")),
                     index_bits=int(rc.value("index_bits")))
    fmt = rc.value("format")
    if fmt == "table":
        return report.table() + "\n"
    if fmt != "csv":
        raise CLIError("config", f"unknown format {fmt!r}")
    row = {"cfg_id": rc.cfg_id(), "n_prefill": rc.value("n_prefill"), "n_gen": rc.value("n_gen"),
           "d": rc.value("d"), "heads": rc.value("heads"), **report.as_dict()}
    return render_csv("account", [row])


HANDLERS = {"gen": cmd_gen, "compress": cmd_compress, "sweep": cmd_sweep,
            "deviate": cmd_deviate, "account": cmd_account}


def run(rc: RunConfig) -> int:
    text = HANDLERS[rc.command](rc)
    if text is not None:
        if rc.out_path:
            Path(rc.out_path).parent.mkdir(parents=True, exist_ok=True)
            with open(rc.out_path, "w", newline="") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("compression")
    g.add_argument("--bits", help="bit width (2, 4, 8; 16 = passthrough)")
    g.add_argument("--sparsity", help="outlier percent s")
    g.add_argument("--rank-prefill", dest="rank_prefill", help="low-rank rank for prefill blocks")
    g.add_argument("--rank-decode", dest="rank_decode", help="low-rank rank for decode blocks")
    g.add_argument("--buffer", help="streaming buffer size n_b")
    g.add_argument("--backbone", choices=sorted(BACKBONES))
    g.add_argument("--coverage-p", dest="coverage_p", help="percent of newest prefill rows given low-rank correction")
    g.add_argument("--iters", help="power iterations")
    g.add_argument("--seed", help="seed (falls back to $GEARKV_SEED)")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--config", help="JSON settings file")
    g.add_argument("--in", dest="in_path", help="directory holding keys.kvt/values.kvt")
    g.add_argument("--out", help="output file (directory for gen); stdout if omitted")
    s = common.add_argument_group("synthetic data")
    s.add_argument("--n", help="tokens")
    s.add_argument("--d", help="channels")
    s.add_argument("--heads", help="attention heads")
    s.add_argument("--outlier-channels", dest="outlier_channels")
    s.add_argument("--outlier-scale", dest="outlier_scale")
    s.add_argument("--rho", help="AR(1) token correlation")
    s.add_argument("--latent-rank", dest="latent_rank")

    parser = argparse.ArgumentParser(prog="gearkv", description="GEAR-style KV-cache compression bench")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write synthetic K/V/q tensors")
    sub.add_parser("compress", parents=[common], help="compress K/V once and report errors")
    sw = sub.add_parser("sweep", parents=[common], help="cross product over comma-separated axes")
    sw.add_argument("--decode-tokens", dest="decode_tokens", help="trailing tokens streamed through the buffer")
    dv = sub.add_parser("deviate", parents=[common], help="per-step attention deviation traces")
    dv.add_argument("--steps")
    dv.add_argument("--variants", help=f"comma list from {','.join(VARIANTS)}")
    ac = sub.add_parser("account", parents=[common], help="closed-form KV size")
    ac.add_argument("--n-prefill", dest="n_prefill")
    ac.add_argument("--n-gen", dest="n_gen")
    ac.add_argument("--buffer-fraction", dest="buffer_fraction", help="reserved share of the buffer")
    ac.add_argument("--index-bits", dest="index_bits")
    ac.add_argument("--format", choices=("csv", "table"))
    return parser


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": message}, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(resolve(args))
    except CLIError as exc:
        kind, msg = exc.kind, str(exc)
    except FlushThresholdError as exc:
        kind, msg = "flush_threshold", str(exc)
    except ConfigError as exc:
        kind, msg = "config", str(exc)
    except TensorFormatError as exc:
        kind, msg = "format", str(exc)
    except FileNotFoundError as exc:
        kind, msg = "missing_file", str(exc)
    except ValueError as exc:
        kind, msg = "invalid", str(exc)
    print(_error_line(kind, msg), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
