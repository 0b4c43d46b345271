"""Flat key=value configuration with defaults for every knob.

A config file is plain text: one `key = value` per line, `#` comments,
blank lines ignored. Unknown and duplicated keys are errors. Durations are
milliseconds and accept either a fixed value ("20") or a uniform range
("uniform:18:22"). Per-channel hop keys default to the global hop_ms.
"""
from __future__ import annotations

import hashlib

from .cache import KeyKind
from .model import ModelParams
from .pipeline import CHANNEL_NAMES, ChannelSpec, MissPolicy, Mode, PipelineConfig
from .simnet import ConfigurationError, LatencySpec

# inherit-from-hop_ms marker for per-channel latency keys
INHERIT = "inherit"

DEFAULTS: dict[str, str] = {
    "mode": "baseline",
    "seed": "42",
    "requests": "200",
    "seq_lens": "128,256,512,1024",
    "short_len": "50",
    "arrival": "sequential",
    "candidates_per_request": "300",
    "organics_per_request": "8",
    "split_count": "4",
    "cache_ttl_ms": "60000",
    "cache_key": "session",
    "miss_policy": "wait",
    "deadline_ms": "200",
    "jitter_budget_ms": "5",
    "budget_ms": "60",
    "d": "32",
    "item_seed": "101",
    "user_seed": "202",
    "ctx_seed": "303",
    "query_seed": "404",
    "beta": "1.0",
    "retrieval_delay_ms": "20",
    "pre_rank_delay_ms": "10",
    "io_capacity": "64",
    "compute_capacity": "8",
    "rpc_seed": "4011",
    "hop_ms": "0.5",
    "pre_model_hop_ms": INHERIT,
    "mid_model_hop_ms": INHERIT,
    "post_model_hop_ms": INHERIT,
    "cache_put_hop_ms": INHERIT,
    "cache_get_hop_ms": INHERIT,
    "pre_model_failure_prob": "0",
    "mid_model_failure_prob": "0",
    "post_model_failure_prob": "0",
    "cache_put_failure_prob": "0",
    "cache_get_failure_prob": "0",
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse file content into a key->value dict; strict about keys."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_settings(path: str | None = None, overrides: dict[str, str] | None = None) -> dict[str, str]:
    """Defaults, then the file, then explicit overrides."""
    settings = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path!r}: {e}") from None
        settings.update(parse_config_text(text))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        settings[key] = str(value)
    return settings


def _int(settings: dict[str, str], key: str) -> int:
    try:
        return int(settings[key], 0)
    except ValueError:
        raise ConfigurationError(f"{key}: not an integer: {settings[key]!r}") from None


def _float(settings: dict[str, str], key: str) -> float:
    try:
        return float(settings[key])
    except ValueError:
        raise ConfigurationError(f"{key}: not a number: {settings[key]!r}") from None


def parse_duration_ms(value: str, *, key: str = "duration") -> LatencySpec:
    """"20" -> fixed 20 ms; "uniform:18:22" -> uniform between 18 and 22 ms."""
    value = value.strip()
    if value.startswith("uniform:"):
        parts = value.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"{key}: expected uniform:lo:hi, got {value!r}")
        try:
            lo, hi = float(parts[1]), float(parts[2])
        except ValueError:
            raise ConfigurationError(f"{key}: bad uniform bounds in {value!r}") from None
        return LatencySpec.uniform(int(lo * 1e6), int(hi * 1e6))
    try:
        ms = float(value)
    except ValueError:
        raise ConfigurationError(f"{key}: not a duration: {value!r}") from None
    if ms < 0:
        raise ConfigurationError(f"{key}: negative duration")
    return LatencySpec.fixed(int(ms * 1e6))


_MODES = {"baseline": Mode.BASELINE, "pcdf": Mode.PCDF}
_KEY_KINDS = {"session": KeyKind.SESSION_ID, "user": KeyKind.USER_ID}
_MISS_POLICIES = {"wait": MissPolicy.WAIT, "inline": MissPolicy.COMPUTE_INLINE}


def _enum(settings: dict[str, str], key: str, table: dict):
    value = settings[key].strip().lower()
    if value not in table:
        raise ConfigurationError(f"{key}: expected one of {sorted(table)}, got {value!r}")
    return table[value]


def build_model_params(settings: dict[str, str]) -> ModelParams:
    return ModelParams(
        d=_int(settings, "d"),
        item_seed=_int(settings, "item_seed"),
        user_seed=_int(settings, "user_seed"),
        ctx_seed=_int(settings, "ctx_seed"),
        query_seed=_int(settings, "query_seed"),
        beta=_float(settings, "beta"),
    )


def build_pipeline_config(settings: dict[str, str], *, mode: Mode | None = None) -> PipelineConfig:
    channels = {}
    for name in CHANNEL_NAMES:
        hop_value = settings[f"{name}_hop_ms"]
        if hop_value.strip().lower() == INHERIT:
            hop_value = settings["hop_ms"]
        channels[name] = ChannelSpec(
            latency=parse_duration_ms(hop_value, key=f"{name}_hop_ms"),
            failure_prob=_float(settings, f"{name}_failure_prob"),
        )
    ttl_ms = _float(settings, "cache_ttl_ms")
    if ttl_ms <= 0:
        raise ConfigurationError("cache_ttl_ms must be positive")
    return PipelineConfig(
        mode=mode if mode is not None else _enum(settings, "mode", _MODES),
        retrieval_delay=parse_duration_ms(settings["retrieval_delay_ms"], key="retrieval_delay_ms"),
        pre_rank_delay=parse_duration_ms(settings["pre_rank_delay_ms"], key="pre_rank_delay_ms"),
        candidates_per_request=_int(settings, "candidates_per_request"),
        organics_per_request=_int(settings, "organics_per_request"),
        split_count=_int(settings, "split_count"),
        cache_ttl_ns=int(ttl_ms * 1e6),
        cache_key_kind=_enum(settings, "cache_key", _KEY_KINDS),
        miss_policy=_enum(settings, "miss_policy", _MISS_POLICIES),
        deadline_ns=int(_float(settings, "deadline_ms") * 1e6),
        jitter_budget_ns=int(_float(settings, "jitter_budget_ms") * 1e6),
        model_params=build_model_params(settings),
        io_capacity=_int(settings, "io_capacity"),
        compute_capacity=_int(settings, "compute_capacity"),
        channels=channels,
        rpc_seed=_int(settings, "rpc_seed"),
    )


def config_hash(settings: dict[str, str]) -> str:
    """Stable fingerprint of the effective settings, for report metadata."""
    canon = "\n".join(f"{k}={settings[k]}" for k in sorted(settings))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


__all__ = [
    "DEFAULTS",
    "INHERIT",
    "parse_config_text",
    "load_settings",
    "parse_duration_ms",
    "build_model_params",
    "build_pipeline_config",
    "config_hash",
]
