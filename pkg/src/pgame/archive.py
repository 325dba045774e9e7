"""CVT MAP-Elites archive and the Deep-grid multi-entry variant."""

from __future__ import annotations

import csv
import enum
import functools
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import neuro

log = logging.getLogger(__name__)


class AddOutcome(enum.Enum):
    NEW_CELL = "new_cell"
    IMPROVED = "improved"
    REJECTED = "rejected"

    @property
    def added(self) -> bool:
        return self is not AddOutcome.REJECTED


@dataclass
class Elite:
    genotype: np.ndarray
    fitness: float
    bd: np.ndarray
    eval_record_id: int = -1


def _lloyd(samples: np.ndarray, centroids: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    k = len(centroids)
    for _ in range(max_iter):
        _, labels = cKDTree(centroids).query(samples, k=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.stack([np.bincount(labels, weights=samples[:, d], minlength=k)
                         for d in range(samples.shape[1])], axis=1)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        moved = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if moved < tol:
            break
    return centroids


@functools.lru_cache(maxsize=16)
def _cached_cvt(bd_dim: int, n_centroids: int, n_samples: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    samples = rng.uniform(0.0, 1.0, size=(n_samples, bd_dim))
    init = samples[rng.permutation(n_samples)[:n_centroids]]
    c = _lloyd(samples, init.copy(), tol=1e-6, max_iter=100)
    c.setflags(write=False)
    return c


def build_cvt(bd_dim: int, n_centroids: int, n_samples: int, seed: int = 0) -> np.ndarray:
    """Lloyd's k-means on uniform samples of the unit hypercube.

    Iterates until no centroid moves by 1e-6 or more, or 100 iterations.
    Empty clusters keep their previous centroid.
    """
    if n_centroids < 1 or n_samples < n_centroids:
        raise ValueError("need 1 <= n_centroids <= n_samples")
    return _cached_cvt(int(bd_dim), int(n_centroids), int(n_samples), int(seed)).copy()


class CvtArchive:
    """One elite per Voronoi cell; strict-improvement replacement."""

    def __init__(self, centroids: np.ndarray):
        self.centroids = np.array(centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValueError("centroids must be a non-empty (n, bd_dim) array")
        self.cells: Dict[int, Elite] = {}
        self.n_nonfinite = 0
        self._keys: Optional[List[int]] = None

    @property
    def n_cells(self) -> int:
        return len(self.centroids)

    @property
    def bd_dim(self) -> int:
        return self.centroids.shape[1]

    def __len__(self) -> int:
        return len(self.cells)

    def coverage(self) -> float:
        return len(self.cells) / self.n_cells

    def cell_index(self, bd) -> int:
        bd = np.asarray(bd, dtype=np.float64)
        if bd.shape != (self.bd_dim,):
            raise ValueError(f"BD of shape {bd.shape} does not match archive dimension {self.bd_dim}")
        d = np.sum((self.centroids - bd) ** 2, axis=1)
        # argmin returns the first minimum, i.e. the lowest index on exact ties
        return int(np.argmin(d))

    def try_add(self, genotype, fitness: float, bd, eval_record_id: int = -1) -> AddOutcome:
        if not np.isfinite(fitness):
            self.n_nonfinite += 1
            log.warning("rejected candidate with non-finite fitness %r", fitness)
            return AddOutcome.REJECTED
        bd = np.asarray(bd, dtype=np.float64)
        idx = self.cell_index(bd)
        current = self.cells.get(idx)
        if current is not None and not fitness > current.fitness:
            return AddOutcome.REJECTED
        self.cells[idx] = Elite(np.array(genotype, dtype=np.float64), float(fitness), bd.copy(), eval_record_id)
        if current is None:
            self._keys = None
            return AddOutcome.NEW_CELL
        return AddOutcome.IMPROVED

    def occupied(self) -> List[int]:
        if self._keys is None:
            self._keys = sorted(self.cells)
        return self._keys

    def uniform_select(self, k: int, rng: np.random.Generator) -> List[np.ndarray]:
        """k genotypes drawn uniformly with replacement over occupied cells."""
        if not self.cells:
            raise RuntimeError("cannot select from an empty archive; run the random initialisation first")
        keys = self.occupied()
        picks = rng.integers(0, len(keys), size=k)
        return [self.cells[keys[i]].genotype for i in picks]

    def fitnesses(self) -> np.ndarray:
        return np.array([self.cells[k].fitness for k in self.occupied()])

    def elites(self):
        for k in self.occupied():
            yield k, self.cells[k]


@dataclass
class DeepCell:
    capacity: int
    entries: List[Elite] = field(default_factory=list)

    def mean_fitness(self) -> float:
        return float(np.mean([e.fitness for e in self.entries]))

    def best(self) -> Elite:
        # first maximum on ties, i.e. the oldest surviving entry
        return max(self.entries, key=lambda e: e.fitness)


def deepgrid_add(cell: DeepCell, entry: Elite, rng: np.random.Generator) -> None:
    """Append; when over capacity evict a uniformly chosen pre-existing entry."""
    cell.entries.append(entry)
    if len(cell.entries) > cell.capacity:
        victim = int(rng.integers(0, len(cell.entries) - 1))
        del cell.entries[victim]


def deepgrid_select_and_score(cell: DeepCell, rng: np.random.Generator):
    """Uniformly drawn entry's genotype plus the cell score (mean entry fitness)."""
    if not cell.entries:
        raise RuntimeError("cannot select from an empty deep-grid cell")
    pick = cell.entries[int(rng.integers(0, len(cell.entries)))]
    return pick.genotype, cell.mean_fitness()


class DeepGridArchive:
    """CVT cells each holding up to ``depth`` previously encountered solutions."""

    def __init__(self, centroids: np.ndarray, depth: int):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self._index = CvtArchive(centroids)
        self.depth = depth
        self.cells: Dict[int, DeepCell] = {}
        self._keys: Optional[List[int]] = None

    @property
    def centroids(self) -> np.ndarray:
        return self._index.centroids

    @property
    def n_cells(self) -> int:
        return self._index.n_cells

    def __len__(self) -> int:
        return len(self.cells)

    def coverage(self) -> float:
        return len(self.cells) / self.n_cells

    def cell_index(self, bd) -> int:
        return self._index.cell_index(bd)

    def add(self, genotype, fitness: float, bd, rng: np.random.Generator, eval_record_id: int = -1) -> AddOutcome:
        if not np.isfinite(fitness):
            self._index.n_nonfinite += 1
            return AddOutcome.REJECTED
        bd = np.asarray(bd, dtype=np.float64)
        idx = self.cell_index(bd)
        cell = self.cells.get(idx)
        outcome = AddOutcome.IMPROVED
        if cell is None:
            cell = self.cells[idx] = DeepCell(self.depth)
            self._keys = None
            outcome = AddOutcome.NEW_CELL
        deepgrid_add(cell, Elite(np.array(genotype, dtype=np.float64), float(fitness), bd.copy(), eval_record_id), rng)
        return outcome

    def occupied(self) -> List[int]:
        if self._keys is None:
            self._keys = sorted(self.cells)
        return self._keys

    def select(self, k: int, rng: np.random.Generator) -> List[np.ndarray]:
        """Uniform over occupied cells, then uniform within the cell."""
        if not self.cells:
            raise RuntimeError("cannot select from an empty archive; run the random initialisation first")
        keys = self.occupied()
        out = []
        for i in rng.integers(0, len(keys), size=k):
            g, _ = deepgrid_select_and_score(self.cells[keys[i]], rng)
            out.append(g)
        return out

    def cell_scores(self) -> np.ndarray:
        return np.array([self.cells[k].mean_fitness() for k in self.occupied()])

    def max_fitness(self) -> float:
        return max(e.fitness for c in self.cells.values() for e in c.entries)

    def reported(self) -> CvtArchive:
        """Per-cell best entry as a plain CVT archive, for dumps and corrected metrics."""
        out = CvtArchive(self.centroids)
        for k in self.occupied():
            best = self.cells[k].best()
            out.cells[k] = Elite(best.genotype.copy(), best.fitness, best.bd.copy(), best.eval_record_id)
        return out


def dump_archive(archive: CvtArchive, directory: str, prefix: str = "archive") -> None:
    """Write ``<prefix>.csv`` plus the ``<prefix>_genotypes.bin`` sidecar."""
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, f"{prefix}.csv")
    bin_path = os.path.join(directory, f"{prefix}_genotypes.bin")
    d = archive.bd_dim
    header = (["cell_id"] + [f"centroid_{i}" for i in range(d)] + [f"bd_{i}" for i in range(d)]
              + ["fitness", "genotype_offset"])
    offset = 0
    with open(csv_path, "w", newline="") as fc, open(bin_path, "wb") as fb:
        w = csv.writer(fc, lineterminator="\n")
        w.writerow(header)
        for k, e in archive.elites():
            w.writerow([k] + [repr(float(x)) for x in archive.centroids[k]]
                       + [repr(float(x)) for x in e.bd] + [repr(e.fitness), offset])
            offset += neuro.write_vector(fb, e.genotype)


def load_archive(directory: str, centroids: np.ndarray, prefix: str = "archive") -> CvtArchive:
    csv_path = os.path.join(directory, f"{prefix}.csv")
    bin_path = os.path.join(directory, f"{prefix}_genotypes.bin")
    archive = CvtArchive(centroids)
    d = archive.bd_dim
    with open(csv_path, newline="") as fc, open(bin_path, "rb") as fb:
        for row in csv.DictReader(fc):
            fb.seek(int(row["genotype_offset"]))
            g = neuro.read_vector(fb)
            bd = np.array([float(row[f"bd_{i}"]) for i in range(d)])
            archive.cells[int(row["cell_id"])] = Elite(g, float(row["fitness"]), bd)
    return archive
