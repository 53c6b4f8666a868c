"""Clustering metrics and the spectral pipeline, piece by piece.

ACC / NMI / ARI conventions, the discrete mutual-information diagnostic,
and what normalized spectral clustering does to an exactly block-diagonal
affinity.
"""

import numpy as np

from invsen.cluster import SpectralConfig, kmeans, normalized_laplacian, smallest_eigenvectors, spectral_cluster
from invsen.evalmetrics import accuracy, ari, discrete_mi, label_entropy, nmi, optimal_assignment
from invsen.numkit import make_rng

# --- metrics against label permutations -------------------------------------
truth = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
pred = np.array([2, 2, 2, 0, 0, 0, 1, 1, 1])  # same partition, shuffled names
print("relabeled partition: ACC", accuracy(pred, truth),
      "NMI", round(nmi(pred, truth), 3), "ARI", round(ari(pred, truth), 3))

noisy = truth.copy()
noisy[0] = 1
noisy[4] = 2
print("two mistakes:        ACC", round(accuracy(noisy, truth), 3),
      "NMI", round(nmi(noisy, truth), 3), "ARI", round(ari(noisy, truth), 3))

# the assignment underneath ACC: best bijection between label sets
cost = -np.array([[3, 0], [1, 2]], dtype=float)  # negated match counts
print("optimal assignment for [[3,0],[1,2]] matches:", optimal_assignment(cost))

# --- mutual information diagnostics ------------------------------------------
rng = make_rng(0, "demo5")
b_corr = truth % 2
b_rand = rng.integers(0, 2, size=truth.size)
print("\nI(truth, correlated bias) =", round(discrete_mi(truth, b_corr), 4),
      "nats of max", round(label_entropy(b_corr), 4))
print("I(truth, random bias)     =", round(discrete_mi(truth, b_rand), 4))

# --- spectral clustering on a block-diagonal affinity ------------------------
sizes = [5, 4, 6]
n = sum(sizes)
affinity = np.zeros((n, n))
labels = np.zeros(n, dtype=int)
start = 0
for c, size in enumerate(sizes):
    w = rng.uniform(0.5, 1.0, size=(size, size))
    w = 0.5 * (w + w.T)
    np.fill_diagonal(w, 0.0)
    affinity[start:start + size, start:start + size] = w
    labels[start:start + size] = c
    start += size
affinity = 0.5 * (affinity + affinity.T)

lap = normalized_laplacian(affinity)
vals, vecs = smallest_eigenvectors(lap, 3)
print("\nsmallest Laplacian eigenvalues:", np.round(vals, 10),
      "(one zero per connected component)")

out = kmeans(vecs, 3, seed=0)
print("k-means on the spectral embedding recovers the blocks:",
      accuracy(out.labels, labels) == 1.0)

# the whole pipeline in one call, on a randomly permuted copy
perm = rng.permutation(n)
shuffled = affinity[np.ix_(perm, perm)]
pred = spectral_cluster(shuffled, SpectralConfig(k=3, seed=0))
print("same after shuffling the samples:",
      accuracy(pred.labels, labels[perm]) == 1.0)
