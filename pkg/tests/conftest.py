from functools import lru_cache

from anchorgzsl.config import PipelineConfig
from anchorgzsl.data import make_synthetic_benchmark
from anchorgzsl.pipeline import run_pipeline

# one-term ablations of the full objective, as config overrides
VARIANTS = {
    "full": {},
    "no_ssl1": {"cluster.lambda1": 0.0},
    "no_ssl2": {"cluster.lambda2": 0.0},
    "no_ssl3": {"gan.lambda3": 0.0},
    "no_cl": {"gan.lambda_cl": 0.0},
}


def variant_config(seed, variant="full", **top):
    cfg = PipelineConfig(seed=seed, **top)
    for key, value in VARIANTS[variant].items():
        section, leaf = key.split(".")
        setattr(getattr(cfg, section), leaf, value)
    return cfg


@lru_cache(maxsize=None)
def default_run(seed, variant="full"):
    """Full pipeline on the default benchmark, cached across test modules."""
    data, split = make_synthetic_benchmark(seed=seed)
    return run_pipeline(variant_config(seed, variant), data, split)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def record(name, passed, detail):
    ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
