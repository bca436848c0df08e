"""Pure-numpy mixture kernels. Reference implementation and import-time fallback."""
import numpy as np


def _responsibilities(x, means, var, log_w):
    diff = x[:, None, :] - means[None, :, :]  # (n, K, d)
    log_comp = log_w[None, :] - 0.5 * np.sum(
        diff * diff / var[None] + np.log(2.0 * np.pi * var)[None], axis=-1
    )
    top = np.max(log_comp, axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    unnorm = np.exp(log_comp - top)
    total = unnorm.sum(axis=1, keepdims=True)
    logp = (np.log(total) + top)[:, 0]
    comp_scores = -diff / var[None]
    return logp, unnorm / total, comp_scores


def mixture_logpdf_score(x, means, var, log_w):
    logp, resp, comp_scores = _responsibilities(x, means, var, log_w)
    score = np.einsum("nk,nkd->nd", resp, comp_scores)
    return logp, score


def mixture_score_hvp(x, means, var, log_w, u):
    _, resp, comp_scores = _responsibilities(x, means, var, log_w)
    score = np.einsum("nk,nkd->nd", resp, comp_scores)
    proj = np.einsum("nkd,nd->nk", comp_scores, u)
    out = np.einsum("nk,nkd->nd", resp, -u[:, None, :] / var[None] + comp_scores * proj[:, :, None])
    return out - score * np.sum(score * u, axis=1, keepdims=True)
