"""Self-contained verification suites with fixed seeds.

Each suite checks one mathematical guarantee of the pipeline against an
independent reference: EM monotonically increases the log posterior, the
log-space E step matches a naive linear-space Bayes computation, the
reverse-mode meta-gradient matches central finite differences, and the
degenerate configuration reproduces nearest-class-mean predictions.  The
``verify`` CLI subcommand and the acceptance tests both run these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import em
from . import metatrain as mt
from . import autodiff as ad
from .annotators import AnnotatorDistribution, pseudo_annotate
from .encoder import (
    EncoderConfig,
    EncoderParams,
    forward,
    forward_graph,
    init_params,
    params_to_tensors,
    collect_gradient,
)
from .seeding import stream


@dataclass
class CheckReport:
    name: str
    passed: bool
    worst: float
    threshold: float
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} (threshold {self.threshold:g})"


def _random_task(
    rng: np.random.Generator,
    num_classes: int,
    support_size: int,
    num_annotators: int,
    dim: int = 3,
) -> em.SupportSet:
    truth = rng.integers(num_classes, size=support_size)
    dist = AnnotatorDistribution.expert_hammer_spammer(0.2, 0.6, 0.2)
    annotations, _ = pseudo_annotate(truth, num_annotators, dist, num_classes, rng)
    centers = rng.standard_normal((num_classes, dim)) * 1.5
    embeddings = centers[truth] + rng.standard_normal((support_size, dim))
    return em.SupportSet(
        embeddings=embeddings,
        annotations=annotations,
        num_classes=num_classes,
        num_annotators=num_annotators,
    )


def check_em_monotone(
    seed: int = 2024, num_tasks: int = 200, em_steps: int = 10, tol: float = 1e-9
) -> CheckReport:
    """Log posterior never decreases across EM iterations."""
    grid = [(k, n, r) for k in (2, 4) for n in (4, 20) for r in (1, 3, 7)]
    hyper = em.PriorHyperparams(tau=1.0, b=1.0, c=1.0, em_steps=em_steps)
    worst = np.inf
    for t in range(num_tasks):
        k, n, r = grid[t % len(grid)]
        support = _random_task(stream(seed, "monotone-task", t), k, n, r)
        lam = em.init_responsibilities(support.annotations, k)
        previous = None
        for _ in range(em_steps):
            protos, pi, confusions = em.m_step(lam, support, hyper)
            value = em.log_posterior(support, protos, pi, confusions, hyper)
            if previous is not None:
                worst = min(worst, value - previous)
            previous = value
            lam = em.e_step(support, protos, pi, confusions)
    return CheckReport(
        name="em-monotone",
        passed=worst >= -tol,
        worst=float(worst),
        threshold=tol,
        detail=f"min posterior delta over {num_tasks} tasks = {worst:.3e}",
    )


def naive_e_step(
    support: em.SupportSet,
    prototypes: np.ndarray,
    class_prior: np.ndarray,
    confusions: list[np.ndarray],
) -> np.ndarray:
    """Linear-space Bayes rule with explicit loops; the E-step oracle."""
    n, k = support.size, support.num_classes
    lam = np.zeros((n, k))
    norm = (2.0 * np.pi) ** (-support.dim / 2.0)
    for i in range(n):
        for kk in range(k):
            gauss = norm * np.exp(
                -0.5 * float(np.sum((support.embeddings[i] - prototypes[kk]) ** 2))
            )
            a = 1.0
            for r, y in support.annotations[i].items():
                a *= confusions[r][y, kk]
            lam[i, kk] = gauss * class_prior[kk] * a
        lam[i] /= lam[i].sum()
    return lam


def check_estep_oracle(seed: int = 77, num_tasks: int = 100, tol: float = 1e-12) -> CheckReport:
    """Log-space responsibilities match the naive linear-space computation."""
    worst = 0.0
    hyper = em.PriorHyperparams(tau=1.0, b=1.0, c=1.0, em_steps=1)
    for t in range(num_tasks):
        rng = stream(seed, "estep-task", t)
        k = int(rng.integers(2, 5))
        n = int(rng.integers(2, 9))
        r = int(rng.integers(1, 4))
        support = _random_task(rng, k, n, r)
        lam0 = em.init_responsibilities(support.annotations, k)
        protos, pi, confusions = em.m_step(lam0, support, hyper)
        fast = em.e_step(support, protos, pi, confusions)
        slow = naive_e_step(support, protos, pi, list(confusions))
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    return CheckReport(
        name="estep-oracle",
        passed=worst < tol,
        worst=worst,
        threshold=tol,
        detail=f"max abs responsibility diff over {num_tasks} tasks = {worst:.3e}",
    )


def episode_loss_value(
    theta: np.ndarray,
    encoder_config: EncoderConfig,
    support_x: np.ndarray,
    annotations: list[dict[int, int]],
    num_classes: int,
    num_annotators: int,
    query_x: np.ndarray,
    query_y: np.ndarray,
    hyper: em.PriorHyperparams,
) -> float:
    """Episode loss through the plain-numpy path (finite differences use this)."""
    params = EncoderParams.unflatten(encoder_config, theta)
    support = em.SupportSet(
        embeddings=forward(support_x, params),
        annotations=annotations,
        num_classes=num_classes,
        num_annotators=num_annotators,
    )
    classifier = em.adapt(support, hyper)
    return mt.query_loss(classifier, forward(query_x, params), query_y)


def check_gradcheck(
    seed: int = 9, num_coords: int = 20, step: float = 1e-5, tol: float = 1e-4
) -> CheckReport:
    """Reverse-mode episode gradient vs central finite differences."""
    worst = 0.0
    cases = [
        (1, (6,), 2, 1),
        (2, (8,), 4, 3),
        (3, (8, 6), 4, 3),
        (2, (10, 5), 2, 3),
    ]
    for case_idx, (em_steps, hidden, ways, annotators) in enumerate(cases):
        rng = stream(seed, "gradcheck", case_idx)
        dim, embed = 4, 3
        shots, qpc = 2, 3
        config = EncoderConfig(
            input_dim=dim, hidden_dims=hidden, output_dim=embed, init_seed=case_idx
        )
        params = init_params(config)
        support_x = rng.standard_normal((ways * shots, dim))
        support_y = np.repeat(np.arange(ways), shots)
        query_x = rng.standard_normal((ways * qpc, dim))
        query_y = np.repeat(np.arange(ways), qpc)
        dist = AnnotatorDistribution.expert_hammer_spammer(0.2, 0.6, 0.2)
        annotations, _ = pseudo_annotate(support_y, annotators, dist, ways, rng)
        hyper = em.PriorHyperparams(tau=1.0, b=1.0, c=1.0, em_steps=em_steps)

        weight_ts, bias_ts = params_to_tensors(params)
        u_s = forward_graph(support_x, weight_ts, bias_ts)
        u_q = forward_graph(query_x, weight_ts, bias_ts)
        protos, pi, _, _ = mt.unrolled_adapt_graph(u_s, annotations, ways, annotators, hyper)
        loss = mt.query_loss_graph(u_q, query_y, protos, pi)
        ad.backward(loss)
        grad = collect_gradient(weight_ts, bias_ts)

        theta = params.flatten()
        coords = rng.choice(theta.size, size=min(num_coords, theta.size), replace=False)
        for c in coords:
            plus, minus = theta.copy(), theta.copy()
            plus[c] += step
            minus[c] -= step
            fd = (
                episode_loss_value(plus, config, support_x, annotations, ways,
                                   annotators, query_x, query_y, hyper)
                - episode_loss_value(minus, config, support_x, annotations, ways,
                                     annotators, query_x, query_y, hyper)
            ) / (2.0 * step)
            rel = abs(fd - grad[c]) / max(1e-8, abs(fd), abs(grad[c]))
            worst = max(worst, rel)
    return CheckReport(
        name="gradcheck",
        passed=worst < tol,
        worst=worst,
        threshold=tol,
        detail=f"max relative error over {len(cases)} cases x {num_coords} coords = {worst:.3e}",
    )


def check_proto_equiv(seed: int = 5, num_queries: int = 1000) -> CheckReport:
    """Degenerate configuration reduces to nearest-class-mean prediction.

    Balanced clean support, one perfect annotator, tau = 0, one EM step:
    the smoothed class prior is exactly uniform and prototypes are exact
    class means, so predictions must equal nearest-mean on every query.
    """
    rng = stream(seed, "proto-equiv")
    ways, shots, dim = 4, 5, 6
    support_y = np.repeat(np.arange(ways), shots)
    centers = rng.standard_normal((ways, dim)) * 3.0
    support_u = centers[support_y] + rng.standard_normal((len(support_y), dim))
    annotations = [{0: int(y)} for y in support_y]
    hyper = em.PriorHyperparams(tau=0.0, b=1.0, c=1.0, em_steps=1, allow_zero_tau=True)
    support = em.SupportSet(support_u, annotations, ways, 1)
    classifier = em.adapt(support, hyper)

    query_labels = rng.integers(ways, size=num_queries)
    query_u = centers[query_labels] + rng.standard_normal((num_queries, dim)) * 2.0
    predicted = em.predict_labels(query_u, classifier)

    class_means = np.stack([support_u[support_y == k].mean(axis=0) for k in range(ways)])
    dists = em.squared_distances(query_u, class_means)
    nearest = np.argmin(dists, axis=1)
    agreement = float(np.mean(predicted == nearest))
    return CheckReport(
        name="proto-equiv",
        passed=agreement == 1.0,
        worst=1.0 - agreement,
        threshold=0.0,
        detail=f"nearest-mean agreement on {num_queries} queries = {agreement:.4f}",
    )


SUITES = {
    "em-monotone": check_em_monotone,
    "estep-oracle": check_estep_oracle,
    "gradcheck": check_gradcheck,
    "proto-equiv": check_proto_equiv,
}
