"""Evolutionary search over architecture and training hyperparameters.

A small (mu + lambda)-style loop: the top quarter of each generation
survives unchanged, the rest is refilled by size-2 tournament selection
plus a single-gene mutation. Fitness is validation macro-F1 after a short
fixed training budget; the intended workflow retrains the winner fully
afterwards. Everything is deterministic for a fixed seed, and fitness is
cached by genome content so elites are never re-evaluated.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, StyleNetError
from .models import ArchConfig, build_model, canonical_config_text
from .seeding import derive_seed, rng_for
from .training import TrainConfig, predict_logits, report_from_predictions, train

log = logging.getLogger(__name__)

LR_FACTORS = (2.0, 3.16)
EMBED_CHOICES = (32, 64, 128)
TRUNCATION_DELTAS = (-2, -1, 1, 2)


@dataclass
class Genome:
    """One search individual: architecture plus training hyperparameters."""

    arch: ArchConfig
    learning_rate: float
    epoch_budget: int
    fitness: float = None
    lineage_id: str = "g0.0"

    def key(self) -> str:
        """Content key: canonical config text plus the learning rate."""
        return canonical_config_text(self.arch) + f"learning_rate={self.learning_rate!r}\n"

    def summary(self) -> str:
        """One-line canonical key=value form (fields joined by '|')."""
        arch = canonical_config_text(self.arch).strip().replace("\n", "|")
        return f"{arch}|learning_rate={self.learning_rate!r}|epoch_budget={self.epoch_budget}"


def _mutation_genes(variant: str):
    if variant == "truncated-resnet":
        return ("truncation", "learning_rate")
    if variant == "gram-attention":
        return ("truncation", "learning_rate", "embed_dim")
    return ("learning_rate", "branch_depth")


def mutate(genome: Genome, rng: np.random.Generator,
           max_branch_depth: int = 5, child_id: str = "") -> Genome:
    """Perturb exactly one gene, clamped to its legal range.

    Multi-patch depth changes are re-checked against the receptive-field
    disjointness predicate and resampled on failure.
    """
    genes = _mutation_genes(genome.arch.variant)
    for _ in range(16):
        gene = genes[int(rng.integers(len(genes)))]
        arch, lr = genome.arch, genome.learning_rate
        if gene == "truncation":
            delta = TRUNCATION_DELTAS[int(rng.integers(len(TRUNCATION_DELTAS)))]
            new = min(max(arch.truncation + delta, 1), arch.max_truncation())
            arch = replace(arch, truncation=new, gram_layers=())
        elif gene == "learning_rate":
            factor = LR_FACTORS[int(rng.integers(len(LR_FACTORS)))]
            if rng.integers(2):
                factor = 1.0 / factor
            lr = float(min(max(lr * factor, 1e-6), 1.0))
        elif gene == "embed_dim":
            arch = replace(arch, embed_dim=int(
                EMBED_CHOICES[int(rng.integers(len(EMBED_CHOICES)))]))
        else:  # branch_depth
            branches = [list(b) for b in arch.branch_configs]
            bi = int(rng.integers(len(branches)))
            delta = 1 if rng.integers(2) else -1
            depth = len(branches[bi])
            new_depth = min(max(depth + delta, 1), max_branch_depth)
            if new_depth > depth:
                k, s, c = branches[bi][-1]
                branches[bi].append((k, s, min(2 * c, 128)))
            elif new_depth < depth:
                branches[bi].pop()
            arch = replace(arch, branch_configs=tuple(tuple(b) for b in branches))
        try:
            arch.validate()
            if arch.variant == "multi-patch":
                build_model(arch)  # re-checks branch disjointness
        except ConfigError:
            continue  # resample the mutation
        return Genome(arch=arch, learning_rate=lr,
                      epoch_budget=genome.epoch_budget, lineage_id=child_id)
    raise ConfigError("could not produce a valid mutation in 16 attempts")


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_genome: str


@dataclass
class SearchResult:
    best: Genome
    history: list = field(default_factory=list)

    def format_history(self) -> str:
        lines = [f"generation={s.generation} best_fitness={s.best_fitness!r} "
                 f"mean_fitness={s.mean_fitness!r} best_genome={s.best_genome}"
                 for s in self.history]
        return "\n".join(lines) + "\n"


def evolve(base: Genome, population_size: int, generations: int,
           train_set: Dataset, val_set: Dataset, seed: int = 0,
           batch_size: int = 32, max_branch_depth: int = 5) -> SearchResult:
    """Run the generational loop and return the best genome plus history.

    Fitness of a genome = validation macro-F1 after training epoch_budget
    epochs from a fresh seeded initialization. A genome whose evaluation
    fails scores 0 and the search continues.
    """
    if population_size < 2:
        raise ConfigError(f"population size must be >= 2, got {population_size}")
    if generations < 1:
        raise ConfigError(f"generations must be >= 1, got {generations}")
    if base.epoch_budget < 1:
        raise ConfigError("epoch budget too small to complete one epoch")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    if set(train_set.paths) & set(val_set.paths):
        raise ConfigError("train and validation sets overlap")

    rng = rng_for(seed, "evolution")
    arch_seed = derive_seed(seed, "genome-arch-init")
    train_seed = derive_seed(seed, "genome-fitness-train")
    fitness_cache = {}

    def fitness(genome: Genome) -> float:
        key = genome.key()
        if key in fitness_cache:
            return fitness_cache[key]
        try:
            model = build_model(replace(genome.arch, seed=arch_seed))
            train(model, train_set, val_set,
                  TrainConfig(epochs=genome.epoch_budget, batch_size=batch_size,
                              learning_rate=genome.learning_rate, seed=train_seed))
            logits = predict_logits(model, val_set.images)
            report = report_from_predictions(val_set.labels,
                                             logits.argmax(axis=1),
                                             val_set.class_names)
            score = report.macro_f1
        except StyleNetError as e:
            log.warning("genome %s failed evaluation (%s); scored 0",
                        genome.lineage_id, e)
            score = 0.0
        fitness_cache[key] = score
        return score

    base.arch.validate()
    population = [replace(base, lineage_id="g0.0")]
    for i in range(1, population_size):
        population.append(mutate(base, rng, max_branch_depth, child_id=f"g0.{i}"))

    elite_count = math.ceil(population_size * 0.25)
    history = []
    best_overall = None
    for gen in range(generations):
        for genome in population:  # index order keeps evaluation deterministic
            genome.fitness = fitness(genome)
        ranked = sorted(range(population_size),
                        key=lambda i: (-population[i].fitness, i))
        best = population[ranked[0]]
        if best_overall is None or best.fitness > best_overall.fitness:
            best_overall = best
        history.append(GenerationStats(
            generation=gen,
            best_fitness=best.fitness,
            mean_fitness=float(np.mean([g.fitness for g in population])),
            best_genome=best.summary()))
        if gen == generations - 1:
            break
        survivors = [population[i] for i in ranked[:elite_count]]
        children = []
        while len(survivors) + len(children) < population_size:
            i, j = int(rng.integers(population_size)), int(rng.integers(population_size))
            # tournament of two; ties break toward the lower genome index
            winner = population[min(i, j)] if population[i].fitness == population[j].fitness \
                else max(population[i], population[j], key=lambda g: g.fitness)
            children.append(mutate(winner, rng, max_branch_depth,
                                   child_id=f"g{gen + 1}.{len(children)}"))
        population = survivors + children
    return SearchResult(best=best_overall, history=history)
