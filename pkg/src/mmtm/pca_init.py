"""PCA projection of a pretrained embedding table onto the model width.

The pretrained table (e.g. a 768-wide export) is read from a TSV file; PCA is
fitted on the vectors of tokens shared with the model's source vocabulary, and
unmatched tokens get seeded Gaussian rows scaled to the matched rows' norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Vocab


class PcaError(Exception):
    pass


class BadDim(PcaError):
    pass


class NoOverlap(PcaError):
    pass


@dataclass
class PretrainedEmbeddings:
    vectors: dict[str, np.ndarray]
    width: int
    source_path: str = ""

    def __post_init__(self):
        for token, vec in self.vectors.items():
            if vec.shape != (self.width,):
                raise BadDim(f"vector for {token!r} has width {vec.shape}")


def load_embeddings_tsv(path: str | Path) -> PretrainedEmbeddings:
    """TSV format: first line "D=<width>", then token<TAB>v1<TAB>...<TAB>vD."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().strip()
        if not head.startswith("D="):
            raise PcaError(f"{path}: first line must be D=<width>")
        width = int(head[2:])
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != width + 1:
                raise PcaError(f"{path}: row for {parts[0]!r} has wrong width")
            vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
    return PretrainedEmbeddings(vectors, width, source_path=str(path))


def write_embeddings_tsv(path: str | Path, pretrained: PretrainedEmbeddings) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"D={pretrained.width}\n")
        for token, vec in pretrained.vectors.items():
            fh.write(token + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")


def pca_project(matrix: np.ndarray, d: int):
    """Project rows onto the top-d principal directions.

    Returns (projected M x d, components D x d, explained_variance length d).
    Components are orthonormal, ordered by decreasing singular value, with
    each column's largest-magnitude entry made positive. Rank-deficient
    inputs are allowed: trailing components come from the SVD's orthonormal
    completion and their variance is reported as 0.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise BadDim(f"expected a matrix, got shape {matrix.shape}")
    m, width = matrix.shape
    if m < 2:
        raise BadDim("need at least 2 rows to fit PCA")
    if not 1 <= d <= width:
        raise BadDim(f"d={d} outside [1, {width}]")
    mean = matrix.mean(axis=0)
    centered = matrix - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=True)
    components = vt[:d].T.copy()
    flip = np.sign(components[np.abs(components).argmax(axis=0),
                              np.arange(d)])
    flip[flip == 0] = 1.0
    components *= flip
    variance = np.zeros(d)
    k = min(d, svals.shape[0])
    variance[:k] = svals[:k] ** 2 / (m - 1)
    projected = centered @ components
    return projected, components, variance


def init_vocab_embeddings(
    vocab: Vocab, pretrained: PretrainedEmbeddings, d: int, seed: int
) -> np.ndarray:
    """Source embedding matrix: PCA-projected rows for tokens found in the
    pretrained table, norm-matched Gaussian rows for everything else."""
    if d > pretrained.width:
        raise BadDim(f"d={d} exceeds pretrained width {pretrained.width}")
    matched = [(i, tok) for i, tok in enumerate(vocab.src_itos)
               if tok in pretrained.vectors]
    if len(matched) < 2:
        raise NoOverlap(
            f"only {len(matched)} vocabulary tokens found in the pretrained table"
        )
    stack = np.stack([pretrained.vectors[tok] for _, tok in matched])
    projected, _, _ = pca_project(stack, d)
    out = np.zeros((vocab.src_size, d))
    for row, (i, _) in zip(projected, matched):
        out[i] = row
    target_norm = float(np.linalg.norm(projected, axis=1).mean())
    rng = np.random.default_rng(seed)
    matched_ids = {i for i, _ in matched}
    for i in range(vocab.src_size):
        if i in matched_ids:
            continue
        row = rng.standard_normal(d)
        norm = float(np.linalg.norm(row)) or 1.0
        out[i] = row * (target_norm / norm)
    return out
