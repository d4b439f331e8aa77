"""Noise simulation, joint denoising/super-resolution and detection analytics
for radiation-degraded industrial imagery."""
from importlib import resources
import json

__version__ = "0.1.0"


def load_schema(name: str) -> dict:
    """Bundled JSON schema for a CLI report (metrics, eval_report, measure, anomaly, train, synth)."""
    text = resources.files(__name__).joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)
