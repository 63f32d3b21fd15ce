"""Collapse and eigenspace-alignment metrics for encoder / predictor weights."""

from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import subspace_angles

from config import COLLAPSE_EIG


def stable_rank(matrix) -> float:
    """srank(M) = |M|_F^2 / |M|_2^2; 0 for the zero matrix."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    spectral = np.linalg.norm(m, 2)
    if spectral == 0:
        return 0.0
    return float(np.sum(m * m) / spectral ** 2)


def top_eigenvalue(sym) -> float:
    """Largest eigenvalue of a symmetric matrix (e.g. Phi = W_f W_f^T)."""
    return float(np.linalg.eigvalsh(np.asarray(sym, dtype=float))[-1])


def eigenspace_clusters(sym, floor: float = COLLAPSE_EIG, rel_gap: float = 1e-3) -> List[np.ndarray]:
    """
    Orthonormal bases of the eigenspaces of ``sym`` with eigenvalue above ``floor``.

    Eigenvalues within ``rel_gap`` (relative) of each other share one cluster, so a
    repeated eigenvalue yields its whole eigenspace rather than an arbitrary basis.
    """
    values, vectors = np.linalg.eigh(np.asarray(sym, dtype=float))
    clusters: List[List[int]] = []
    for i in range(len(values)):
        if values[i] <= floor:
            continue
        if clusters and abs(values[i] - values[clusters[-1][-1]]) <= rel_gap * abs(values[i]):
            clusters[-1].append(i)
        else:
            clusters.append([i])
    return [vectors[:, idx] for idx in clusters]


def principal_angle_max(phi, *others, floor: float = COLLAPSE_EIG) -> Optional[float]:
    """
    Largest principal angle (degrees) between each non-collapsed eigenspace V of
    ``phi`` and its image W V, over all W in ``others``.

    0 when every W maps the eigenspaces of phi into themselves (aligned). None when
    phi has no eigenvalue above ``floor``.
    """
    clusters = eigenspace_clusters(phi, floor)
    if not clusters:
        return None
    worst = 0.0
    for w in others:
        w = np.asarray(w, dtype=float)
        for basis in clusters:
            image = w @ basis
            if np.linalg.matrix_rank(image) < basis.shape[1]:
                continue  # W annihilates part of V; no angle to measure
            worst = max(worst, float(np.degrees(np.max(subspace_angles(basis, image)))))
    return worst


def compute_collapse_metrics(wf, wh=None, wg=None) -> Dict:
    """Run all collapse metrics on one set of linear weights."""
    wf = np.asarray(wf, dtype=float)
    phi = wf @ wf.T
    top = top_eigenvalue(phi)
    result = {
        "top_eigenvalue": top,
        "stable_rank_wf": stable_rank(wf),
        "collapsed": bool(top <= COLLAPSE_EIG),
    }
    if wg is not None:
        result["stable_rank_wg"] = stable_rank(wg)
    aligned_with = [w for w in (wg, wh) if w is not None]
    if aligned_with:
        angle = principal_angle_max(phi, *aligned_with)
        result["principal_angle_max"] = float("nan") if angle is None else angle
    return result
