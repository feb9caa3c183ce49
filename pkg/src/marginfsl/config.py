"""Experiment configuration: JSON documents in, validated dataclasses out.

Validation errors name the offending field path, e.g. ``loss.margin``.
"""

import json
from dataclasses import asdict, dataclass

from .data import EpisodeSpec
from .losses import HEAD_KINDS, KINDS, LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    hidden: tuple = (64,)
    embedding_dim: int = 32
    activation: str = "relu"


@dataclass(frozen=True)
class GnnConfig:
    layer_widths: tuple = (32, 32)
    adjacency_hidden: tuple = (16,)
    adjacency_activation: str = "tanh"
    per_layer_adjacency: bool = True
    normalize_adjacency: bool = True
    leaky_slope: float = 0.2


@dataclass(frozen=True)
class TrainConfig:
    model: str = "pn"
    episode: EpisodeSpec = EpisodeSpec(5, 1, 5, 0)
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    n_updates: int = 500
    batch_episodes: int = 8
    eval_every: int = 100
    eval_episodes: int = 100
    seed: int = 0
    margin_mode: str = "heuristic"
    clip_norm: float = 10.0           # None disables clipping
    metric: str = "euclidean"
    n_pos: int = 10
    n_neg: int = 10
    encoder: EncoderConfig = EncoderConfig()
    gnn: GnnConfig = GnnConfig()

    def to_dict(self):
        d = asdict(self)
        d["loss"] = {"kind": self.loss.kind, "lambda": self.loss.lam,
                     "margin": self.loss.margin, "scale": self.loss.scale}
        return _lists(d)

    @classmethod
    def from_dict(cls, d, path=""):
        return _parse_train(d or {}, path)


@dataclass(frozen=True)
class DataConfig:
    csv: str = None
    split: str = None
    generator: dict = None
    split_counts: tuple = (20, 5, 5)
    split_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    lambdas: tuple = (1.0,)
    margins: tuple = ("config",)      # numbers, or "config" to keep train.margin_mode
    test_episodes: int = 600
    test_query: int = 15
    out_dir: str = "."

    def to_dict(self):
        d = {"train": self.train.to_dict(), "data": _lists(asdict(self.data)),
             "sweep": {"lambdas": list(self.lambdas), "margins": list(self.margins)},
             "test_episodes": self.test_episodes, "test_query": self.test_query,
             "out_dir": self.out_dir}
        return d


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


class _Reader:
    def __init__(self, d, path):
        if not isinstance(d, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        self.d = d
        self.path = path
        self.seen = set()

    def _p(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, default, kind=None, check=None, msg="invalid value"):
        self.seen.add(key)
        if key not in self.d:
            return default
        v = self.d[key]
        if v is None and default is None:
            return None
        if kind is not None:
            try:
                if kind is bool:
                    if not isinstance(v, bool):
                        raise TypeError
                elif kind is int:
                    if isinstance(v, bool) or int(v) != v:
                        raise TypeError
                    v = int(v)
                elif kind is float:
                    if isinstance(v, bool):
                        raise TypeError
                    v = float(v)
                elif kind is tuple:
                    if not isinstance(v, list):
                        raise TypeError
                    v = tuple(v)
                elif not isinstance(v, kind):
                    raise TypeError
            except (TypeError, ValueError):
                raise ConfigError(f"{self._p(key)}: expected {kind.__name__}, got {v!r}") from None
        if check is not None and not check(v):
            raise ConfigError(f"{self._p(key)}: {msg} ({v!r})")
        return v

    def sub(self, key):
        self.seen.add(key)
        return _Reader(self.d.get(key, {}), self._p(key))

    def done(self):
        extra = sorted(set(self.d) - self.seen)
        if extra:
            raise ConfigError(f"{self._p(extra[0])}: unknown field")


def _int_tuple(v):
    return all(isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v)


def _parse_train(d, path):
    r = _Reader(d, path)
    base = TrainConfig()
    model = r.get("model", base.model, str, lambda v: v in ("pn", "gnn"), "must be 'pn' or 'gnn'")

    e = r.sub("episode")
    c_way = e.get("c_way", 5, int, lambda v: v >= 2, "must be >= 2")
    k_shot = e.get("k_shot", 1, int, lambda v: v >= 1, "must be >= 1")
    n_query = e.get("n_query", 5, int, lambda v: v >= 1, "must be >= 1")
    n_unl = e.get("n_unlabeled", 0, int, lambda v: v >= 0, "must be >= 0")
    e.done()
    episode = EpisodeSpec(c_way, k_shot, n_query, n_unl)

    lo = r.sub("loss")
    kind = lo.get("kind", "triplet", str, lambda v: v in KINDS, f"must be one of {KINDS}")
    lam = lo.get("lambda", 1.0, float, lambda v: v >= 0, "must be >= 0")
    margin = lo.get("margin", 10.0, float, lambda v: v > 0, "must be > 0")
    scale = lo.get("scale", 10.0, float, lambda v: v > 0, "must be > 0")
    lo.done()
    loss = LossConfig(lam, margin, scale, kind)

    o = r.sub("optimizer")
    opt = OptimizerConfig(
        o.get("name", "adam", str, lambda v: v in ("adam", "sgd"), "must be 'adam' or 'sgd'"),
        o.get("lr", 1e-3, float, lambda v: v > 0, "must be > 0"),
        o.get("betas", (0.9, 0.999), tuple,
              lambda v: len(v) == 2 and all(isinstance(b, (int, float)) and 0 <= b < 1 for b in v),
              "must be two numbers in [0, 1)"),
        o.get("eps", 1e-8, float, lambda v: v > 0, "must be > 0"),
    )
    o.done()

    en = r.sub("encoder")
    encoder = EncoderConfig(
        en.get("hidden", (64,), tuple, _int_tuple, "must be a list of positive ints"),
        en.get("embedding_dim", 32, int, lambda v: v >= 1, "must be >= 1"),
        en.get("activation", "relu", str, lambda v: v in ("relu", "tanh"), "must be relu or tanh"),
    )
    en.done()

    g = r.sub("gnn")
    gnn = GnnConfig(
        g.get("layer_widths", (32, 32), tuple, lambda v: len(v) >= 1 and _int_tuple(v),
              "must be a non-empty list of positive ints"),
        g.get("adjacency_hidden", (16,), tuple, _int_tuple, "must be a list of positive ints"),
        g.get("adjacency_activation", "tanh", str, lambda v: v in ("relu", "tanh"), "must be relu or tanh"),
        g.get("per_layer_adjacency", True, bool),
        g.get("normalize_adjacency", True, bool),
        g.get("leaky_slope", 0.2, float, lambda v: 0 <= v < 1, "must be in [0, 1)"),
    )
    g.done()

    cfg = TrainConfig(
        model=model, episode=episode, loss=loss, optimizer=opt,
        n_updates=r.get("n_updates", base.n_updates, int, lambda v: v >= 1, "must be >= 1"),
        batch_episodes=r.get("batch_episodes", base.batch_episodes, int, lambda v: v >= 1, "must be >= 1"),
        eval_every=r.get("eval_every", base.eval_every, int, lambda v: v >= 1, "must be >= 1"),
        eval_episodes=r.get("eval_episodes", base.eval_episodes, int, lambda v: v >= 2, "must be >= 2"),
        seed=r.get("seed", base.seed, int),
        margin_mode=r.get("margin_mode", base.margin_mode, str,
                          lambda v: v in ("fixed", "heuristic"), "must be 'fixed' or 'heuristic'"),
        clip_norm=r.get("clip_norm", base.clip_norm, None,
                        lambda v: v is None or (isinstance(v, (int, float)) and v > 0),
                        "must be null or > 0"),
        metric=r.get("metric", base.metric, str, lambda v: v in ("euclidean", "cosine"),
                     "must be 'euclidean' or 'cosine'"),
        n_pos=r.get("n_pos", base.n_pos, int, lambda v: v >= 1, "must be >= 1"),
        n_neg=r.get("n_neg", base.n_neg, int, lambda v: v >= 1, "must be >= 1"),
        encoder=encoder, gnn=gnn,
    )
    r.done()
    if cfg.model == "pn" and cfg.loss.kind in HEAD_KINDS:
        raise ConfigError(f"{r._p('loss.kind')}: {cfg.loss.kind!r} needs a parametric classifier; "
                          "not available for the prototypical network")
    return cfg


def parse_experiment(d):
    r = _Reader(d, "")
    train = _parse_train(r.d.get("train", {}), "train")
    r.seen.add("train")
    dd = r.sub("data")
    data = DataConfig(
        csv=dd.get("csv", None, str),
        split=dd.get("split", None, str),
        generator=dd.get("generator", None, dict),
        split_counts=dd.get("split_counts", (20, 5, 5), tuple,
                            lambda v: len(v) == 3 and _int_tuple(v), "must be three positive ints"),
        split_seed=dd.get("split_seed", 0, int),
    )
    dd.done()
    if (data.csv is None) == (data.generator is None):
        raise ConfigError("data: give exactly one of 'csv' or 'generator'")
    sw = r.sub("sweep")
    lambdas = sw.get("lambdas", (train.loss.lam,), tuple,
                     lambda v: len(v) > 0 and all(isinstance(x, (int, float)) and x >= 0 for x in v),
                     "must be a non-empty list of numbers >= 0")
    margins = sw.get("margins", ("config",), tuple,
                     lambda v: len(v) > 0 and all(x == "config" or (isinstance(x, (int, float)) and x > 0)
                                                  for x in v),
                     "must be a non-empty list of numbers > 0 or 'config'")
    sw.done()
    cfg = ExperimentConfig(
        train=train, data=data,
        lambdas=tuple(float(x) for x in lambdas),
        margins=tuple(x if x == "config" else float(x) for x in margins),
        test_episodes=r.get("test_episodes", 600, int, lambda v: v >= 1, "must be >= 1"),
        test_query=r.get("test_query", 15, int, lambda v: v >= 1, "must be >= 1"),
        out_dir=r.get("out_dir", ".", str),
    )
    r.done()
    return cfg


def load_experiment(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_experiment(d)


def save_experiment(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
