"""Independent reference implementations used to cross-check the package.

Everything here is written from the defining formulas, not from the package
internals: dense-matrix BM25 instead of an inverted index, explicit loops
and closed forms instead of the production code paths. Slow and simple on
purpose.
"""

import math
import re
from collections import Counter

import numpy as np

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


def oracle_tokenize(text):
    """Lowercase, split on anything that is not a letter or digit."""
    return _WORD_RE.findall(text.lower())


def oracle_bm25_all_scores(docs, query, k1=1.2, b=0.75):
    """BM25 of every document for one query, by direct formula evaluation.

    docs: list of (doc_id, caption). Returns {doc_id: score} including
    zeros. Query terms contribute once per occurrence.
    """
    tokenized = [oracle_tokenize(caption) for _, caption in docs]
    n = len(docs)
    lengths = [len(t) for t in tokenized]
    avgdl = sum(lengths) / n if n else 0.0
    tfs = [Counter(t) for t in tokenized]
    df = Counter()
    for tf in tfs:
        df.update(tf.keys())

    scores = {}
    for (doc_id, _), tf, length in zip(docs, tfs, lengths):
        total = 0.0
        for term in oracle_tokenize(query):
            if term not in tf:
                continue
            idf = math.log((n - df[term] + 0.5) / (df[term] + 0.5) + 1.0)
            t = tf[term]
            total += idf * t * (k1 + 1.0) / (t + k1 * (1.0 - b + b * length / avgdl))
        scores[doc_id] = total
    return scores


def oracle_top_k(scores, k):
    """Positive scores only, highest first, ties by ascending doc id."""
    ranked = sorted(
        ((s, doc_id) for doc_id, s in scores.items() if s > 0.0),
        key=lambda pair: (-pair[0], pair[1]),
    )
    return [(doc_id, s) for s, doc_id in ranked[:k]]


def oracle_scalings(sigma, sigma_data):
    """(c_in, c_out, c_skip) straight from the defining expressions."""
    return (
        1.0 / math.sqrt(sigma**2 + sigma_data**2),
        sigma * sigma_data / math.sqrt(sigma**2 + sigma_data**2),
        sigma_data**2 / (sigma**2 + sigma_data**2),
    )


def oracle_dense_forward(w1, b1, w2, b2, w3, b3, z):
    """Three dense layers with tanh, recomposed with bare numpy calls."""
    a1 = np.tanh(z @ w1.T + b1)
    a2 = np.tanh(a1 @ w2.T + b2)
    return a2 @ w3.T + b3


def oracle_finite_difference(f, theta, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        plus = theta.copy()
        plus[j] += h
        minus = theta.copy()
        minus[j] -= h
        grad[j] = (f(plus) - f(minus)) / (2.0 * h)
    return grad


def oracle_karras_sigma(i, num_steps, sigma_min, sigma_max, rho):
    """One schedule entry from the interpolation formula."""
    hi = sigma_max ** (1.0 / rho)
    lo = sigma_min ** (1.0 / rho)
    return (hi + i / (num_steps - 1) * (lo - hi)) ** rho


def oracle_gaussian_ode_solution(x_at_sigma_max, sigma, sigma_max, sigma_data):
    """Closed-form probability-flow solution for N(0, sigma_data^2) data:
    x(sigma) = x(sigma_max) * sqrt((sigma^2 + sigma_data^2) / (sigma_max^2 + sigma_data^2))."""
    return x_at_sigma_max * np.sqrt(
        (sigma**2 + sigma_data**2) / (sigma_max**2 + sigma_data**2)
    )


def oracle_frechet_diagonal(mean_a, var_a, mean_b, var_b):
    """Closed form for diagonal covariances:
    sum((mu_a - mu_b)^2) + sum((sqrt(var_a) - sqrt(var_b))^2)."""
    mean_a, var_a = np.asarray(mean_a), np.asarray(var_a)
    mean_b, var_b = np.asarray(mean_b), np.asarray(var_b)
    return float(
        np.sum((mean_a - mean_b) ** 2) + np.sum((np.sqrt(var_a) - np.sqrt(var_b)) ** 2)
    )


def oracle_feature_vector(data):
    """Feature layout recomputed with explicit loops over a (f,h,w,c) array."""
    f, h, w, c = data.shape
    means = [data[i, :, :, ch].mean() for i in range(f) for ch in range(c)]
    variances = [data[i, :, :, ch].var() for i in range(f) for ch in range(c)]
    diffs = [np.mean((data[i] - data[i - 1]) ** 2) for i in range(1, f)]
    return np.array(means + variances + diffs)
