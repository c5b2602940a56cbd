"""Run configuration file: strict JSON with a required ``schema_version``."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import ByteTokenizer, Corpus, WordTokenizer
from .errors import ConfigError
from .model import ModelConfig, preset
from .moe import MoEConfig
from .train import TrainConfig

SCHEMA_VERSION = 1
TOP_KEYS = {"schema_version", "model", "train", "corpus", "output_dir", "probes"}
CORPUS_KEYS = {"path", "tokenizer", "vocab_file", "eval_fraction", "synthetic"}
SYNTHETIC_KEYS = {"n_tokens", "seed"}
PROBE_KEYS = {"ratios", "k_values", "variants", "ablation_n_base", "ablation_k_base"}


class ConfigFileError(ConfigError):
    """A config error anchored to a line of the source file."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source = source
        self.line = line
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    corpus: dict = field(default_factory=lambda: {"synthetic": {"n_tokens": 40_000, "seed": 0}})
    output_dir: str | None = None
    probes: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def load_corpus(self, base_dir: Path | None = None) -> Corpus:
        c = self.corpus
        frac = c.get("eval_fraction", 0.1)
        if "synthetic" in c:
            syn = c["synthetic"]
            return Corpus.synthetic(syn.get("n_tokens", 40_000), syn.get("seed", 0), eval_fraction=frac)
        path = Path(c["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if c.get("tokenizer", "byte") == "word":
            vocab = Path(c["vocab_file"])
            if base_dir is not None and not vocab.is_absolute():
                vocab = base_dir / vocab
            tok = WordTokenizer.from_file(vocab)
        else:
            tok = ByteTokenizer()
        return Corpus.from_file(path, tok, eval_fraction=frac)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "train": {**dataclasses.asdict(self.train), "decay_points": list(self.train.decay_points)},
            "corpus": self.corpus,
            "output_dir": self.output_dir,
            "probes": self.probes,
        }


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _strict(section: dict, allowed: set[str], where: str, text: str, source: str) -> None:
    if not isinstance(section, dict):
        raise ConfigFileError(f"'{where}' must be an object", source, _line_of(text, where))
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigFileError(f"unknown key '{unknown[0]}' in '{where}'", source, _line_of(text, unknown[0]))


def _fields(klass) -> set[str]:
    return {f.name for f in dataclasses.fields(klass)}


_INVARIANT_KEYS = (("m*K >= K_s", "K_s"), ("N_r >= K_r", "K"), ("D divides", "D"), ("device_groups", "device_groups"),
                   ("init_std", "init_std"), ("base_ffn_inner", "base_ffn_inner"), ("moe.d", "d"))


def _anchor(err: ConfigError, text: str, fallback: str) -> int | None:
    msg = str(err)
    for needle, key in _INVARIANT_KEYS:
        if needle in msg and _line_of(text, key):
            return _line_of(text, key)
    return _line_of(text, fallback)


def _build_model(raw: dict, text: str, source: str) -> ModelConfig:
    raw = dict(raw)
    moe_raw = raw.pop("moe", {})
    allowed = _fields(ModelConfig) - {"moe"} | {"preset"}
    _strict(raw, allowed, "model", text, source)
    _strict(moe_raw, _fields(MoEConfig), "moe", text, source)
    name = raw.pop("preset", None)
    if moe_raw.get("device_groups") is not None:
        moe_raw["device_groups"] = tuple(tuple(g) for g in moe_raw["device_groups"])
    if name is not None:
        base = preset(name)
        moe = dataclasses.replace(base.moe, **moe_raw)
        if "d" in raw and "d" not in moe_raw:
            moe = dataclasses.replace(moe, d=raw["d"])
        return dataclasses.replace(base, moe=moe, **raw)
    return ModelConfig(moe=MoEConfig(**moe_raw), **raw)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a run config; every failure is a :class:`ConfigFileError` with a line anchor."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"invalid JSON: {e.msg}", source, e.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigFileError("top level must be an object", source, 1)
    _strict(raw, TOP_KEYS, "<top level>", text, source)
    if "schema_version" not in raw:
        raise ConfigFileError("missing required key 'schema_version'", source, 1)
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigFileError(f"unsupported schema_version {raw['schema_version']!r} (expected {SCHEMA_VERSION})",
                              source, _line_of(text, "schema_version"))
    if "model" not in raw:
        raise ConfigFileError("missing required key 'model'", source, 1)
    try:
        model = _build_model(raw["model"], text, source)
    except ConfigFileError:
        raise
    except (ConfigError, TypeError, ValueError) as e:
        raise ConfigFileError(f"model: {e}", source, _anchor(e, text, "model")) from None

    train_raw = raw.get("train", {})
    _strict(train_raw, _fields(TrainConfig), "train", text, source)
    try:
        train = TrainConfig(**train_raw)
    except (ConfigError, TypeError, ValueError) as e:
        raise ConfigFileError(f"train: {e}", source, _line_of(text, "train")) from None

    corpus = raw.get("corpus", {"synthetic": {"n_tokens": 40_000, "seed": 0}})
    _strict(corpus, CORPUS_KEYS, "corpus", text, source)
    if "synthetic" in corpus:
        _strict(corpus["synthetic"], SYNTHETIC_KEYS, "synthetic", text, source)
    elif "path" not in corpus:
        raise ConfigFileError("corpus needs 'path' or 'synthetic'", source, _line_of(text, "corpus"))
    if corpus.get("tokenizer", "byte") not in ("byte", "word"):
        raise ConfigFileError("corpus.tokenizer must be 'byte' or 'word'", source, _line_of(text, "tokenizer"))
    if corpus.get("tokenizer") == "word" and "vocab_file" not in corpus:
        raise ConfigFileError("word tokenizer needs 'vocab_file'", source, _line_of(text, "tokenizer"))

    probes = raw.get("probes", {})
    _strict(probes, PROBE_KEYS, "probes", text, source)
    return RunConfig(model=model, train=train, corpus=corpus, output_dir=raw.get("output_dir"),
                     probes=probes, raw=raw)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigFileError(f"cannot read config: {e.strerror}", str(path)) from None
    return parse_run_config(text, str(path))
