"""Train (once) and cache the reference completion model used by the acceptance suite."""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict
from pathlib import Path

from solescan.completion import (
    CompletionConfig,
    PairOptions,
    TrainOptions,
    load_model,
    save_model,
    scan_pairs,
    set_deterministic,
    train,
)
from solescan.datasets import TRAIN_SEED
from solescan.formats import read_kv, write_kv
from solescan.shapegen import sample_dataset

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"
N_TRAIN_SHAPES = 40
PAIRS = PairOptions()
CONFIG = CompletionConfig()
OPTIONS = TrainOptions(epochs=8)
PAIR_SEED = 0


def _key() -> str:
    text = repr((N_TRAIN_SHAPES, TRAIN_SEED, PAIR_SEED, asdict(PAIRS), asdict(CONFIG), asdict(OPTIONS)))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def paths() -> tuple[Path, Path]:
    key = _key()
    return CACHE_DIR / f"reference_{key}.ckpt", CACHE_DIR / f"reference_{key}.txt"


def reference_model(log=None):
    """(model, info) where info holds the wall and CPU times of pair synthesis and training."""
    ckpt, info_path = paths()
    if ckpt.exists() and info_path.exists():
        return load_model(ckpt), read_kv(info_path)
    set_deterministic(1)
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    t0, c0 = time.perf_counter(), time.process_time()
    meshes = [s.mesh for s in sample_dataset(N_TRAIN_SHAPES, TRAIN_SEED)]
    pairs = scan_pairs(meshes, PAIRS, seed=PAIR_SEED)
    t_pairs = time.perf_counter() - t0

    def progress(step, value):
        if log is not None and step % 50 == 0:
            log(f"step {step} loss {value:.6f} t {time.perf_counter() - t0:.0f}s")

    model, report = train(pairs, CONFIG, OPTIONS, progress=progress)
    info = {"pairs": len(pairs), "steps": report.steps, "pair_seconds": t_pairs,
            "train_seconds": report.wall_time, "total_seconds": time.perf_counter() - t0,
            "cpu_seconds": time.process_time() - c0,
            "final_epoch_loss": report.epoch_loss[-1], "best_epoch_loss": min(report.epoch_loss)}
    save_model(model, ckpt)
    write_kv(info, info_path)
    return model, read_kv(info_path)


if __name__ == "__main__":
    _, info = reference_model(log=lambda s: print(s, flush=True))
    print(info)
