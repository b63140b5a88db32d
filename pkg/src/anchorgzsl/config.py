"""Pipeline configuration as a single JSON document."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .clustering import ClusterConfig
from .errors import ConfigError
from .evaluation import SplitSpec
from .synthesis import GanConfig, SoftmaxConfig


@dataclass
class BenchConfig:
    K: int = 5
    n_seen: int = 3
    d: int = 32
    sep_cos_max: float = 0.3
    n_per_class: int = 300
    noise_std: float = 0.1
    overlap_cos: float = None


@dataclass
class PipelineConfig:
    seed: int
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    classifier: SoftmaxConfig = field(default_factory=SoftmaxConfig)
    softmax: SoftmaxConfig = field(default_factory=SoftmaxConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    bench: BenchConfig = field(default_factory=BenchConfig)
    synth_per_class: int = 200
    out_dir: str = None

    def validate(self):
        if self.seed is None or not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed is mandatory and must fit in 64 unsigned bits")
        if self.synth_per_class < 0:
            raise ConfigError("synth_per_class must be >= 0")
        self.cluster.validate()
        self.gan.validate()
        self.classifier.validate()
        self.softmax.validate()
        self.split.validate(require_classes=False)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        if "seed" not in doc:
            raise ConfigError("config must set a seed")
        nested = {"cluster": ClusterConfig, "gan": GanConfig, "classifier": SoftmaxConfig,
                  "softmax": SoftmaxConfig, "split": SplitSpec, "bench": BenchConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in doc.items():
            if key in nested:
                sub = nested[key]
                bad = set(value) - {f.name for f in fields(sub)}
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                kw[key] = sub(**value)
            else:
                kw[key] = value
        return cls(**kw)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def digest(self):
        """SHA-256 over the canonical JSON, ignoring output locations."""
        doc = self.to_dict()
        doc.pop("out_dir", None)
        canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path):
    with open(path) as fh:
        return PipelineConfig.from_json(fh.read())


def set_path(cfg, dotted, value):
    """Override ``a.b`` on a config from a CLI string, keeping the field's type."""
    obj = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        if not hasattr(obj, p):
            raise ConfigError(f"unknown config section {p!r}")
        obj = getattr(obj, p)
    if not hasattr(obj, leaf):
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    setattr(obj, leaf, parsed)
    return cfg
