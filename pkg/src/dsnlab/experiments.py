"""Named experiment grids and a small driver that runs them through the CLI.

Each grid entry is a config text; runs land under ``out/<run_id>/`` and a
finished run is skipped on the next invocation, so a grid can be resumed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import cli

SEEDS = (0, 1, 2)

# glyph16 comparison at full data size; every variant uses the shared defaults
GLYPH_STEPS = 2000
POSE_STEPS = 2000


@dataclass(frozen=True)
class Entry:
    scenario: str
    variant: str
    extra: dict = field(default_factory=dict)

    def text(self, seed: int, steps: int) -> str:
        keys = {"scenario": self.scenario, "variant": self.variant, "steps": steps,
                "eval_interval": steps, "n_train": 5000, "n_eval": 1000, "seed": seed}
        keys.update(self.extra)
        return "".join(f"{k} = {v}\n" for k, v in keys.items())


COMPARISON = {
    "source_only": Entry("glyph16", "source_only"),
    "dann_only": Entry("glyph16", "dann_only"),
    "dsn_dann": Entry("glyph16", "dsn", {"similarity": "dann"}),
    "target_only": Entry("glyph16", "target_only"),
}
ABLATION = {
    "dsn_beta0": Entry("glyph16", "dsn", {"similarity": "dann", "beta": 0.0, "label": "beta0"}),
    "dsn_mse": Entry("glyph16", "dsn", {"similarity": "dann", "recon": "mse", "label": "mse"}),
}
POSE = {
    "pose_source_only": Entry("pose_glyph", "source_only"),
    "pose_dsn_dann": Entry("pose_glyph", "dsn", {"similarity": "dann"}),
}


def steps_for(entry: Entry) -> int:
    return POSE_STEPS if entry.scenario == "pose_glyph" else GLYPH_STEPS


def config_path(out: Path, name: str, seed: int) -> Path:
    return out / "configs" / f"{name}_s{seed}.cfg"


def run_entry(out: Path, name: str, entry: Entry, seed: int, quiet: bool = True) -> dict:
    """Run one (entry, seed) and return its result row."""
    path = config_path(out, name, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(entry.text(seed, steps_for(entry)))
    argv = ["run", "--config", str(path), "--out", str(out)] + (["--quiet"] if quiet else [])
    code = cli.main(argv)
    if code != 0:
        raise RuntimeError(f"{name} seed {seed} exited with {code}")
    run_id = cli.load_config(path).run_id
    (row,) = cli.read_results_file(out / run_id / "result.csv")
    return row


def run_grid(out: str | Path, grid: dict[str, Entry], seeds=SEEDS, quiet: bool = True) -> dict[str, list[dict]]:
    out = Path(out)
    return {name: [run_entry(out, name, entry, s, quiet) for s in seeds] for name, entry in grid.items()}
