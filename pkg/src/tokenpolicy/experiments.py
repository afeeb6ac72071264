"""Ablation harness: policy-design grid and reward-design grid on a toy world."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import MaskedTokenPredictor
from .estimator import AdaptiveDecodingPolicy
from .metrics import diversity_from_features, exact_divergence, frechet_distance, stats_from_features
from .reward import Discriminator
from .sampler import StaticProvider, generate
from .world import WorldSpec, decode_tokens, make_codebook, sample_world

log = logging.getLogger(__name__)

POLICY_GRID = ("static-cosine", "learnable-non-adaptive", "adaptive")
REWARD_GRID = (("fid-batch", "learnable-non-adaptive"), ("external", "adaptive"), ("adversarial", "adaptive"))


def reference_set(spec: WorldSpec, n: int, seed: int):
    """``n`` real sequences with classes split as evenly as possible."""
    rng = np.random.default_rng([seed, 1])
    y = np.arange(n) % spec.n_classes
    return sample_world(spec, y, rng), y


def pretrain_backbone(spec: WorldSpec, seed: int, n_steps: int = 3000, n_train: int = 20000,
                      **kw) -> MaskedTokenPredictor:
    rng = np.random.default_rng([seed, 2])
    y = rng.integers(0, spec.n_classes, n_train)
    X = sample_world(spec, y, rng)
    return MaskedTokenPredictor(
        n_tokens=spec.n_tokens, codebook_size=spec.codebook_size, n_classes=spec.n_classes,
        n_steps=n_steps, random_state=seed, **kw,
    ).fit(X, y)


def featurize(embedder, images, workers: int = 1, chunk: int = 1024) -> np.ndarray:
    """Row-wise embedding in fixed chunks; identical output for any ``workers``."""
    images = np.asarray(images)
    parts = [images[i: i + chunk] for i in range(0, images.shape[0], chunk)]
    if workers <= 1 or len(parts) <= 1:
        return np.concatenate([embedder.transform(p) for p in parts])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(embedder.transform, parts)))


@dataclass
class ArmResult:
    name: str
    policy_mode: str
    reward: str
    seed: int
    toy_fid: float
    diversity: float
    tv: float | None = None
    disc_acc: list = field(default_factory=list, repr=False)
    mean_reward: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("disc_acc")
        d.pop("mean_reward")
        return d


def evaluate_tokens(est: AdaptiveDecodingPolicy, tokens, spec: WorldSpec | None = None,
                    workers: int = 1) -> dict:
    feats = featurize(est.embedder_, est._decode(tokens), workers)
    report = {
        "n": int(tokens.shape[0]),
        "toy_fid": frechet_distance(stats_from_features(feats), est.ref_stats_),
        "diversity": diversity_from_features(feats),
    }
    if spec is not None and spec.enumerable:
        report.update({k: v for k, v in exact_divergence(tokens, spec).items() if k != "n"})
    return report


def frozen_disc_hook(backbone, codebook, grid, real_images, seed: int, n_steps: int = 500,
                     batch: int = 256, T: int = 4):
    """A discriminator trained once against static-schedule samples, then frozen.

    Serves as a fixed per-image scorer for the external-reward arm.
    """
    rng = np.random.default_rng([seed, 3])
    d = Discriminator(n_pixels=int(np.prod(real_images.shape[1:])), random_state=seed)
    tokens, _ = generate(backbone, StaticProvider(), T, rng.integers(0, backbone.n_classes, 2048), rng)
    fake = decode_tokens(tokens, codebook, grid)
    for _ in range(n_steps):
        d.partial_fit(real_images[rng.integers(0, len(real_images), batch)],
                      fake[rng.integers(0, len(fake), batch)])
    d.net_.params.setflags(write=False)

    def hook(image):
        return float(d.score(image[None])[0])
    return hook


def run_arm(backbone, spec: WorldSpec, X, y, policy_mode: str, reward: str = "adversarial", seed: int = 0,
            n_loops: int = 1000, ppo: dict | None = None, n_eval: int = 2000, codebook=None,
            external_hook=None, workers: int = 1, log_path=None, checkpoint_dir=None, eval_every=0,
            **kw) -> tuple[ArmResult, AdaptiveDecodingPolicy]:
    codebook = codebook or make_codebook(spec.codebook_size)
    est = AdaptiveDecodingPolicy(
        backbone=backbone, codebook=codebook, grid=spec.grid, policy_mode=policy_mode, reward=reward,
        ppo=ppo, n_loops=n_loops, external_hook=external_hook, random_state=seed, log_path=log_path,
        checkpoint_dir=checkpoint_dir, eval_every=eval_every, n_eval=n_eval, **kw,
    ).fit(X, y)
    tokens = est.sample(n_eval, random_state=[seed, 4])
    rep = evaluate_tokens(est, tokens, spec, workers)
    name = policy_mode if reward == "adversarial" else f"{policy_mode}/{reward}"
    res = ArmResult(name, policy_mode, reward, seed, rep["toy_fid"], rep["diversity"], rep.get("tv"))
    if est.log_ is not None:
        res.disc_acc = est.log_.column("disc_acc").tolist()
        res.mean_reward = est.log_.column("mean_reward").tolist()
    log.info("%s seed %d: toy-FID %.4f diversity %.4f", name, seed, res.toy_fid, res.diversity)
    return res, est


def policy_grid(backbone, spec, X, y, seeds=(0, 1, 2), **kw) -> list[ArmResult]:
    return [run_arm(backbone, spec, X, y, mode, "adversarial", seed, **kw)[0]
            for mode in POLICY_GRID for seed in seeds]


def reward_grid(backbone, spec, X, y, seeds=(0, 1, 2), codebook=None, **kw) -> list[ArmResult]:
    codebook = codebook or make_codebook(spec.codebook_size)
    real = decode_tokens(X, codebook, spec.grid)
    out = []
    for reward, mode in REWARD_GRID:
        for seed in seeds:
            hook = frozen_disc_hook(backbone, codebook, spec.grid, real, seed) if reward == "external" else None
            out.append(run_arm(backbone, spec, X, y, mode, reward, seed, codebook=codebook,
                               external_hook=hook, **kw)[0])
    return out


def best_of(results: list[ArmResult]) -> dict[str, ArmResult]:
    """Lowest toy-FID run per arm name."""
    best: dict[str, ArmResult] = {}
    for r in results:
        if r.name not in best or r.toy_fid < best[r.name].toy_fid:
            best[r.name] = r
    return best


def comparison_table(results: list[ArmResult]) -> str:
    """Markdown table of per-arm mean and best toy-FID and diversity."""
    names = list(dict.fromkeys(r.name for r in results))
    lines = ["| arm | seeds | toy-FID mean | toy-FID best | diversity mean |",
             "|---|---|---|---|---|"]
    for name in names:
        rs = [r for r in results if r.name == name]
        fids = [r.toy_fid for r in rs]
        lines.append(f"| {name} | {len(rs)} | {np.mean(fids):.4f} | {min(fids):.4f} | "
                     f"{np.mean([r.diversity for r in rs]):.4f} |")
    return "\n".join(lines) + "\n"
