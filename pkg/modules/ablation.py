
"""
Embedding-size ablation: invert the same scene with different numbers of
pseudo vectors N, sharing seeds across sizes, and compare final loss and
held-out-view quality.
"""
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from modules.distill import generate_views
from modules.errors import ConfigError
from modules.inversion import InversionConfig, evaluate_embedding, invert3d
from modules.metrics import psnr
from modules.renderer import RenderSettings, render

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (1, 4, 8, 32)
TABLE_COLUMNS = ["num_vectors", "seed", "final_loss", "heldout_loss", "heldout_psnr"]


@dataclass
class AblationResult:
    table: pd.DataFrame   # one row per (num_vectors, seed)
    curves: pd.DataFrame  # num_vectors, seed, step, loss

    def summary(self) -> pd.DataFrame:
        """Mean over seeds, one row per size."""
        return (self.table.groupby("num_vectors", as_index=False)[["final_loss", "heldout_loss", "heldout_psnr"]]
                .mean())

    def fraction_better(self, large: int, small: int, column: str = "final_loss") -> float:
        """Share of seeds where `column` at N=large is <= the value at N=small."""
        pivot = self.table.pivot(index="seed", columns="num_vectors", values=column)
        return float((pivot[large] <= pivot[small]).mean())


def final_loss(losses, window: int = 50) -> float:
    window = max(1, min(window, len(losses)))
    return float(np.mean(losses[-window:]))


def _one_size(num_vectors: int, seed: int, base: InversionConfig, scene, denoiser, codec, vocab, eval_cameras,
              sampling_steps: int, settings):
    config = replace(base, num_vectors=num_vectors, seed=seed)
    z_star, trace = invert3d(scene, denoiser, codec, vocab, config, render_settings=settings)
    heldout = evaluate_embedding(z_star, scene, eval_cameras, denoiser, codec, vocab, template=config.template,
                                 seed=seed, camera_conditioning=config.camera_conditioning, render_settings=settings)
    views = generate_views(z_star, eval_cameras, denoiser, codec, vocab, sampling_steps, seed,
                           template=config.template)
    targets = [render(scene, cam, settings) for cam in eval_cameras]
    row = {
        "num_vectors": num_vectors,
        "seed": seed,
        "final_loss": final_loss(trace.losses),
        "heldout_loss": heldout,
        "heldout_psnr": float(np.mean([psnr(v, t) for v, t in zip(views, targets)])),
    }
    curve = pd.DataFrame({"num_vectors": num_vectors, "seed": seed,
                          "step": np.arange(1, len(trace.losses) + 1), "loss": trace.losses})
    return row, curve


def ablate_embedding_size(sizes, base: InversionConfig, scene, denoiser, codec, vocab, eval_cameras, seeds=(0,),
                          sampling_steps: int = 20, workers: int = 1, settings=None, history=None) -> AblationResult:
    """
    Runs invert3d for every (N, seed). The seed set is shared by all sizes.
    `workers > 1` runs the jobs on a thread pool; rows keep the (N, seed) order.
    """
    sizes = sorted({int(n) for n in sizes})
    if not sizes or min(sizes) < 1:
        raise ConfigError("ablation sizes must be >= 1", sizes=sizes)
    if not eval_cameras:
        raise ConfigError("ablation needs held-out cameras")
    settings = settings or RenderSettings()
    jobs = [(n, int(s)) for n in sizes for s in seeds]
    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futures = {ex.submit(_one_size, n, s, base, scene, denoiser, codec, vocab, eval_cameras,
                                 sampling_steps, settings): (n, s) for n, s in jobs}
            for f in as_completed(futures):
                results[futures[f]] = f.result()
    else:
        for n, s in jobs:
            results[(n, s)] = _one_size(n, s, base, scene, denoiser, codec, vocab, eval_cameras,
                                        sampling_steps, settings)

    rows = [results[job][0] for job in jobs]
    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    curves = pd.concat([results[job][1] for job in jobs], ignore_index=True)
    for row in rows:
        logger.info("N=%d seed=%d final loss %.5f held-out psnr %.2f dB",
                    row["num_vectors"], row["seed"], row["final_loss"], row["heldout_psnr"])
        if history is not None:
            history.add_entry("ablate", f"N={row['num_vectors']} seed={row['seed']}", round(row["final_loss"], 6))
    return AblationResult(table, curves)
