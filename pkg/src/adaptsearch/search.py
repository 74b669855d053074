"""Supernet training, evolutionary path search, and deferred test-time selection.

Training samples one uniform path per episode and steps that path's adapter
and fine-tune blocks against the prototypical loss. The evolutionary search
then ranks candidate paths by post-fine-tuning NCC accuracy averaged over
one fresh episode per training domain each generation, recombines the top M
and drops the worst M. A diversity-constrained shortlist of the history's
best performers is carried to meta-test, where each episode picks the
shortlist member with the lowest post-fine-tuning support loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor, sgd_step
from .episodes import Domain, Episode, sample_episode
from .metrics import (
    class_centroids,
    cosine_distance,
    episode_loss,
    episode_loss_from_plan,
    episode_loss_plan,
    ncc_accuracy,
    proto_loss,
)
from .seeding import rng_from
from .supernet import Backbone, ParamBlock, PathEncoding, Supernet, sample_uniform_path

logger = logging.getLogger(__name__)

# Stop when the mean population fitness improves by less than EPS for
# PATIENCE consecutive generations (or at the generation cap).
CONVERGENCE_EPS = 1e-3
CONVERGENCE_PATIENCE = 3


@dataclass
class TrainConfig:
    episodes_total: int
    eta1: float
    eta2: float
    way_range: tuple[int, int] = (3, 8)
    shot_range: tuple[int, int] = (1, 5)
    n_query: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("eta1 and eta2 must be positive")
        if self.episodes_total < 0:
            raise ValueError("episodes_total must be >= 0")


@dataclass
class SearchConfig:
    population_size: int = 64
    top_m: int = 8
    mutation_rate: float = 0.05
    generations: int = 15
    finetune_epochs: int = 20
    shortlist_n: int = 3
    diversity_t: float = 0.4
    episodes_per_eval: int = 1
    eta1: float = 0.1
    eta2: float = 0.01
    way_range: tuple[int, int] = (3, 8)
    shot_range: tuple[int, int] = (1, 5)
    n_query: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.top_m <= self.population_size:
            raise ValueError("top_m must be in (0, population_size]")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must be in [0, 1]")
        if self.shortlist_n < 1:
            raise ValueError("shortlist_n must be >= 1")
        if not 0.0 <= self.diversity_t <= 1.0:
            raise ValueError("diversity_t must be in [0, 1]")
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("eta1 and eta2 must be positive")


@dataclass(frozen=True)
class FitnessRecord:
    path: PathEncoding
    fitness: float
    generation: int


class SearchHistory:
    """Every evaluated (path, fitness), deduplicated by bits keeping the best fitness."""

    def __init__(self) -> None:
        self._records: dict[str, FitnessRecord] = {}

    def add(self, path: PathEncoding, fitness: float, generation: int) -> None:
        if not 0.0 <= fitness <= 1.0:
            raise ValueError(f"fitness must be in [0, 1], got {fitness}")
        key = path.bit_string()
        existing = self._records.get(key)
        # Strict improvement replaces; ties keep the earliest evaluation.
        if existing is None or fitness > existing.fitness:
            self._records[key] = FitnessRecord(path, fitness, generation)

    def __len__(self) -> int:
        return len(self._records)

    def records(self) -> list[FitnessRecord]:
        return list(self._records.values())

    def by_fitness(self) -> list[FitnessRecord]:
        """Records sorted by descending fitness; ties by bit string, then generation."""
        return sorted(
            self._records.values(),
            key=lambda r: (-r.fitness, r.path.bit_string(), r.generation),
        )

    def best(self) -> FitnessRecord:
        if not self._records:
            raise ValueError("history is empty")
        return self.by_fitness()[0]


@dataclass
class Shortlist:
    paths: list[PathEncoding]
    fitnesses: list[float]
    truncated: bool = False


@dataclass
class SelectionResult:
    index: int
    path: PathEncoding
    params: dict[str, ParamBlock]
    support_loss: float
    candidate_losses: list[float] = field(default_factory=list)


def _episode_step(net_forward, episode: Episode, adapters, tuned, eta1: float, eta2: float) -> float:
    """One full-episode gradient step on the given parameter groups."""
    tape = Tape()
    emb_s = net_forward(episode.support_x, tape)
    emb_q = net_forward(episode.query_x, tape)
    loss = episode_loss(tape, emb_s, episode.support_y, emb_q, episode.query_y)
    tape.backward(loss)
    sgd_step(adapters, eta1)
    sgd_step(tuned, eta2)
    return float(loss.data)


def pretrain_backbone(
    backbone: Backbone,
    domains: list[Domain],
    episodes_total: int,
    lr: float,
    way_range: tuple[int, int] = (3, 8),
    shot_range: tuple[int, int] = (1, 5),
    n_query: int = 10,
    seed: int = 0,
) -> Backbone:
    """Episodic pre-training of the plain chain on the training domains."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    rng = rng_from(seed, "pretrain")
    blocks = backbone.blocks()
    for step in range(episodes_total):
        domain = domains[int(rng.integers(len(domains)))]
        ep = sample_episode(domain, way_range, shot_range, n_query, "train", rng)
        tape = Tape()
        emb_s = backbone.forward(ep.support_x, tape)
        emb_q = backbone.forward(ep.query_x, tape)
        loss = episode_loss(tape, emb_s, ep.support_y, emb_q, ep.query_y)
        tape.backward(loss)
        sgd_step(blocks, lr)
        if (step + 1) % 1000 == 0:
            logger.info("pretrain episode %d/%d loss %.4f", step + 1, episodes_total, loss.data)
    return backbone


def supernet_train(net: Supernet, domains: list[Domain], cfg: TrainConfig) -> Supernet:
    """One uniform path per episode; eta1 steps its adapters, eta2 its fine-tuned copies."""
    if not domains:
        raise ValueError("at least one training domain required")
    rng = rng_from(cfg.seed, "supernet-train")
    for step in range(cfg.episodes_total):
        domain = domains[int(rng.integers(len(domains)))]
        ep = sample_episode(domain, cfg.way_range, cfg.shot_range, cfg.n_query, "train", rng)
        path = sample_uniform_path(net.k, rng)
        adapters, tuned = net.path_param_groups(path)
        loss = _episode_step(
            lambda x, tape: net.forward_path(path, x, tape), ep, adapters, tuned, cfg.eta1, cfg.eta2
        )
        if (step + 1) % 1000 == 0:
            logger.info("supernet episode %d/%d loss %.4f", step + 1, cfg.episodes_total, loss)
    return net


def finetune_on_support(
    net: Supernet,
    p: PathEncoding,
    support_x: np.ndarray,
    support_y: np.ndarray,
    epochs: int,
    eta1: float,
    eta2: float,
) -> dict[str, ParamBlock]:
    """Clone the path's tunable blocks and fit them to the support set.

    Each epoch is one full-support gradient step of the prototypical loss
    with the support serving as both centroids and queries. The supernet is
    never mutated; the adapted clones are returned (empty for the all-frozen
    path). Activations below the first adapted layer are constant, so they
    are computed once and reused across epochs.
    """
    params = net.clone_path_params(p)
    if not params or epochs == 0:
        return params
    start = net.first_adapted_layer(p)
    if start > 0:
        prefix = net.forward_path(p, support_x, stop_layer=start).data
    else:
        prefix = np.asarray(support_x, dtype=np.float64)
    plan = episode_loss_plan(support_y, support_y)
    adapters, tuned = net.path_param_groups(p, overrides=params)
    for _ in range(epochs):
        tape = Tape()
        emb = net.forward_path(p, Tensor(prefix), tape, overrides=params, start_layer=start)
        loss = episode_loss_from_plan(tape, emb, emb, plan)
        tape.backward(loss)
        sgd_step(adapters, eta1)
        sgd_step(tuned, eta2)
    return params


def adapted_support_loss(
    net: Supernet,
    p: PathEncoding,
    support_x: np.ndarray,
    support_y: np.ndarray,
    params: dict[str, ParamBlock],
) -> float:
    emb = net.forward_path(p, support_x, overrides=params).data
    return proto_loss(emb, support_y, class_centroids(emb, support_y))


def adapted_query_accuracy(
    net: Supernet, p: PathEncoding, episode: Episode, params: dict[str, ParamBlock]
) -> float:
    emb_s = net.forward_path(p, episode.support_x, overrides=params).data
    emb_q = net.forward_path(p, episode.query_x, overrides=params).data
    return ncc_accuracy(emb_q, episode.query_y, class_centroids(emb_s, episode.support_y))


def evaluate_fitness(
    net: Supernet, p: PathEncoding, episodes: list[Episode], cfg: SearchConfig
) -> float:
    """Mean post-fine-tuning NCC query accuracy of path ``p`` over the episodes."""
    if not episodes:
        raise ValueError("at least one evaluation episode required")
    total = 0.0
    for ep in episodes:
        params = finetune_on_support(
            net, p, ep.support_x, ep.support_y, cfg.finetune_epochs, cfg.eta1, cfg.eta2
        )
        total += adapted_query_accuracy(net, p, ep, params)
    return total / len(episodes)


def evolve(
    net: Supernet,
    domains: list[Domain],
    cfg: SearchConfig,
    eval_episodes: list[Episode] | None = None,
    on_generation=None,
) -> SearchHistory:
    """Evolutionary search over paths; returns the deduplicated evaluation history.

    Per generation: evaluate every member (offspring from the previous
    generation included), breed top_m offspring by uniform crossover of two
    distinct top-M parents plus per-bit mutation, then drop the worst top_m
    evaluated members. ``eval_episodes``, when given, replaces the
    per-generation episode draw (used to hold evaluation data fixed).
    ``on_generation(gen, population, fits)`` is called after each evaluation.
    """
    if cfg.population_size < 2:
        raise ValueError("population_size must be >= 2")
    if not domains and eval_episodes is None:
        raise ValueError("at least one training domain required")
    rng = rng_from(cfg.seed, "evolve")
    population = [sample_uniform_path(net.k, rng) for _ in range(cfg.population_size)]
    history = SearchHistory()
    means: list[float] = []
    for gen in range(1, cfg.generations + 1):
        if eval_episodes is not None:
            episodes = eval_episodes
        else:
            episodes = [
                sample_episode(d, cfg.way_range, cfg.shot_range, cfg.n_query, "train", rng)
                for d in domains
                for _ in range(cfg.episodes_per_eval)
            ]
        fits = [evaluate_fitness(net, p, episodes, cfg) for p in population]
        for p, f in zip(population, fits):
            history.add(p, f, gen)
        if on_generation is not None:
            on_generation(gen, list(population), list(fits))
        means.append(float(np.mean(fits)))
        logger.info(
            "generation %d/%d best %.4f mean %.4f distinct %d",
            gen, cfg.generations, max(fits), means[-1], len(history),
        )
        if len(means) > CONVERGENCE_PATIENCE and all(
            means[-i] - means[-i - 1] < CONVERGENCE_EPS for i in range(1, CONVERGENCE_PATIENCE + 1)
        ):
            logger.info("population fitness converged after %d generations", gen)
            break
        if gen == cfg.generations:
            break
        order = sorted(
            range(len(population)), key=lambda i: (-fits[i], population[i].bit_string())
        )
        parents = [population[i] for i in order[: cfg.top_m]]
        offspring = []
        for _ in range(cfg.top_m):
            if len(parents) == 1:
                pa = pb = parents[0]
            else:
                ia, ib = rng.choice(len(parents), size=2, replace=False)
                pa, pb = parents[int(ia)], parents[int(ib)]
            take_a = rng.integers(0, 2, size=len(pa.bits))
            bits = np.where(take_a == 1, pa.bits, pb.bits)
            flips = rng.random(len(bits)) < cfg.mutation_rate
            bits = np.where(flips, 1 - bits, bits)
            offspring.append(PathEncoding(tuple(int(b) for b in bits)))
        survivors = [population[i] for i in order[: cfg.population_size - cfg.top_m]]
        population = survivors + offspring
    return history


def select_shortlist(history: SearchHistory, n: int, t: float) -> Shortlist:
    """Greedy by descending fitness under a pairwise cosine-distance floor of ``t``.

    May return fewer than ``n`` paths (``truncated=True``) when the history
    cannot satisfy the diversity constraint.
    """
    if len(history) == 0:
        raise ValueError("history is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    chosen: list[FitnessRecord] = []
    for rec in history.by_fitness():
        vec = rec.path.as_array()
        if all(cosine_distance(vec, c.path.as_array()) >= t for c in chosen):
            chosen.append(rec)
            if len(chosen) == n:
                break
    if len(chosen) < n:
        logger.warning(
            "diversity threshold %.3f unsatisfiable: %d of %d paths selected", t, len(chosen), n
        )
    return Shortlist(
        paths=[c.path for c in chosen],
        fitnesses=[c.fitness for c in chosen],
        truncated=len(chosen) < n,
    )


def test_time_select(
    net: Supernet,
    shortlist: list[PathEncoding],
    support_x: np.ndarray,
    support_y: np.ndarray,
    epochs: int,
    eta1: float,
    eta2: float,
) -> SelectionResult:
    """Fine-tune every shortlist candidate on the support set and keep the one
    with the lowest adapted support loss (ties: lowest shortlist index)."""
    if not shortlist:
        raise ValueError("shortlist is empty")
    best: SelectionResult | None = None
    losses: list[float] = []
    for i, p in enumerate(shortlist):
        params = finetune_on_support(net, p, support_x, support_y, epochs, eta1, eta2)
        loss = adapted_support_loss(net, p, support_x, support_y, params)
        losses.append(loss)
        if best is None or loss < best.support_loss:
            best = SelectionResult(index=i, path=p, params=params, support_loss=loss)
    best.candidate_losses = losses
    return best


test_time_select.__test__ = False  # keep pytest from collecting the op by its name


# ---------------------------------------------------------------------------
# File interfaces: search-history CSV and shortlist text file.
# ---------------------------------------------------------------------------


def write_history_csv(history: SearchHistory, path, provenance: list[str] = ()) -> None:
    records = sorted(
        history.records(), key=lambda r: (r.generation, r.fitness, r.path.bit_string())
    )
    with open(path, "w", newline="") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        fh.write("generation,path_bits,fitness\n")
        for r in records:
            fh.write(f"{r.generation},{r.path.bit_string()},{r.fitness!r}\n")


def read_history_csv(path) -> SearchHistory:
    history = SearchHistory()
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("generation,"):
                continue
            gen, bits, fitness = line.split(",")
            history.add(PathEncoding.from_bit_string(bits), float(fitness), int(gen))
    if len(history) == 0:
        raise ValueError(f"{path}: no history records")
    return history


def write_shortlist(shortlist: Shortlist, path, provenance: list[str] = ()) -> None:
    with open(path, "w") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        if shortlist.truncated:
            fh.write("# warning: diversity constraint unsatisfiable, shortlist truncated\n")
        for p, f in zip(shortlist.paths, shortlist.fitnesses):
            fh.write(f"{p.bit_string()} {f!r}\n")


def read_shortlist(path) -> Shortlist:
    paths: list[PathEncoding] = []
    fitnesses: list[float] = []
    truncated = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# warning"):
                truncated = True
            if not line or line.startswith("#"):
                continue
            bits, fitness = line.split()
            paths.append(PathEncoding.from_bit_string(bits))
            fitnesses.append(float(fitness))
    if not paths:
        raise ValueError(f"{path}: empty shortlist")
    return Shortlist(paths=paths, fitnesses=fitnesses, truncated=truncated)
