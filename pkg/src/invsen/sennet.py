"""Self-expressive network: key/query embeddings, soft-thresholded inner
products as self-expression coefficients, and the reconstruction loss with
elastic-net regularization.

Conventions used throughout:

* A batch is an (n, d) array with one sample per row.
* The coefficient matrix C is (n, n) with C[i, j] the weight of sample i in
  the reconstruction of sample j, so the reconstruction of the batch is
  C.T @ X. Coefficients are c_ij = alpha * soft_threshold(u_j . v_i, beta)
  where u comes from the key net (applied to the reconstructed sample) and
  v from the query net (applied to the contributing sample). The diagonal
  is identically zero whenever queries and keys are the same set.
* beta >= 0 is kept positive through a softplus reparameterization of an
  unconstrained scalar; alpha is a positive scale, fixed by default and
  trainable on request.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ShapeError
from .numkit import MlpParams, mlp_backward, mlp_forward, sigmoid, softplus, softplus_inv

# With tanh embeddings and the uniform init, off-diagonal inner products
# start around |u.v| ~ 0.01-0.08; the threshold must begin below that
# scale or every coefficient is born in the dead zone and no gradient
# ever flows.
DEFAULT_BETA0 = 0.005


@dataclass
class SEModel:
    """Key/query networks plus the scalar coefficient parameters.

    beta_raw and alpha are held as 0-d float arrays so the optimizer can
    update them in place alongside the network weights. swap_roles flips
    which net embeds the reconstructed sample versus the contributors
    (sensitivity toggle; the default follows the key-on-target convention).
    """

    key_net: MlpParams
    query_net: MlpParams
    embed_dim: int
    beta_raw: np.ndarray = field(
        default_factory=lambda: np.array(softplus_inv(DEFAULT_BETA0)))
    alpha: np.ndarray = field(default_factory=lambda: np.array(1.0))
    alpha_learnable: bool = False
    swap_roles: bool = False

    @property
    def beta(self) -> float:
        return float(softplus(self.beta_raw))

    @property
    def in_dim(self) -> int:
        return self.key_net.in_dim


def init_se_model(in_dim: int, hidden=(64, 64, 64), embed_dim: int = 64,
                  beta0: float = DEFAULT_BETA0, alpha: float = 1.0,
                  alpha_learnable: bool = False, swap_roles: bool = False,
                  rng: np.random.Generator | None = None) -> SEModel:
    """Fresh model: hidden layers are ReLU, the embedding layer is tanh.

    The tanh output bounds every embedding coordinate, which keeps the
    inner products u.v in a range where the soft threshold stays active.
    """
    if rng is None:
        rng = numkit.make_rng(0, "se-model")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    dims = [in_dim, *hidden, embed_dim]
    acts = ["relu"] * len(hidden) + ["tanh"]
    key_net = numkit.init_mlp(dims, acts, batchnorm=False, rng=rng)
    query_net = numkit.init_mlp(dims, acts, batchnorm=False, rng=rng)
    return SEModel(key_net=key_net, query_net=query_net, embed_dim=embed_dim,
                   beta_raw=np.array(softplus_inv(beta0)), alpha=np.array(float(alpha)),
                   alpha_learnable=alpha_learnable, swap_roles=swap_roles)


def soft_threshold(t, beta):
    """sign(t) * max(0, |t| - beta): shrink toward zero, exact zero inside
    the dead zone |t| <= beta."""
    t = np.asarray(t, dtype=float)
    return np.sign(t) * np.maximum(0.0, np.abs(t) - beta)


def elastic_net_reg(c, delta: float):
    """Elastic-net penalty r(c) = delta*|c| + ((1-delta)/2)*c^2."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    c = np.asarray(c, dtype=float)
    return delta * np.abs(c) + 0.5 * (1.0 - delta) * c * c


def elastic_net_reg_grad(c, delta: float):
    """Subgradient of the elastic-net penalty (0 at c = 0)."""
    c = np.asarray(c, dtype=float)
    return delta * np.sign(c) + (1.0 - delta) * c


def coefficients(model: SEModel, x_queries: np.ndarray, x_keys: np.ndarray,
                 mode: str = "eval", mask_self: bool | None = None):
    """Coefficient block for reconstructing x_keys samples from x_queries.

    Returns (block, cache). block has shape (n_queries, n_keys) with entry
    (i, j) = alpha * soft_threshold(u_j . v_i, beta): row i is a
    contributing sample (query-embedded), column j the sample being
    reconstructed (key-embedded). When queries and keys are the same set
    (the same array object, or mask_self=True) the self-pairs i = j are
    masked to exactly zero.

    The cache carries everything needed for the loss gradients; eval-time
    callers can ignore it.
    """
    x_queries = np.asarray(x_queries, dtype=float)
    x_keys = np.asarray(x_keys, dtype=float)
    if x_queries.ndim != 2 or x_keys.ndim != 2:
        raise ShapeError("coefficients: inputs must be 2-d (samples, features)")
    if x_queries.shape[1] != model.in_dim or x_keys.shape[1] != model.in_dim:
        raise ShapeError(
            f"coefficients: feature dim {x_queries.shape[1]}/{x_keys.shape[1]} "
            f"!= model input width {model.in_dim}")
    same = x_queries is x_keys
    if mask_self is None:
        mask_self = same
    if mask_self and x_queries.shape[0] != x_keys.shape[0]:
        raise ShapeError("coefficients: mask_self requires equally sized sets")

    if model.swap_roles:
        target_net, contrib_net = model.query_net, model.key_net
    else:
        target_net, contrib_net = model.key_net, model.query_net
    target_out, target_cache = mlp_forward(target_net, x_keys, mode)
    contrib_in = x_keys if same else x_queries
    contrib_out, contrib_cache = mlp_forward(contrib_net, contrib_in, mode)

    s = contrib_out @ target_out.T  # s[i, j] = v_i . u_j
    beta = model.beta
    alpha = float(model.alpha)
    live = np.abs(s) > beta
    if mask_self:
        np.fill_diagonal(live, False)
    thr = np.where(live, np.sign(s) * (np.abs(s) - beta), 0.0)
    block = alpha * thr
    if model.swap_roles:
        key_out, key_cache = contrib_out, contrib_cache
        query_out, query_cache = target_out, target_cache
    else:
        key_out, key_cache = target_out, target_cache
        query_out, query_cache = contrib_out, contrib_cache
    cache = {
        "s": s, "live": live, "thr": thr, "alpha": alpha, "beta": beta,
        "key_out": key_out, "query_out": query_out,
        "key_cache": key_cache, "query_cache": query_cache,
        "mask_self": mask_self,
    }
    return block, cache


def coefficient_matrix(model: SEModel, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Full (n, n) self-expression coefficient matrix with zero diagonal."""
    block, _ = coefficients(model, x, x, mode=mode)
    return block


@dataclass
class SELossResult:
    """Loss value plus every gradient the trainer needs.

    grad_key_out / grad_query_out are the gradients at the embedding level
    (before backprop through the nets); the trainer adds the adversarial
    contributions there, then reuses key_cache / query_cache for a single
    combined backward pass. grad_key / grad_query are the pure
    self-expression parameter gradients (per-layer dicts).
    """

    loss: float
    recon: float
    reg: float
    coeffs: np.ndarray
    grad_key: list
    grad_query: list
    grad_beta_raw: float
    grad_alpha: float
    grad_key_out: np.ndarray
    grad_query_out: np.ndarray
    key_out: np.ndarray
    query_out: np.ndarray
    key_cache: dict
    query_cache: dict


def se_loss(model: SEModel, batch: np.ndarray, gamma: float, delta: float,
            mode: str = "train") -> SELossResult:
    """Self-expression loss over one batch and its exact gradients.

    loss = (gamma / 2n) * sum_j ||x_j - sum_{i != j} C[i, j] x_i||^2
         + (1 / n) * sum_{i != j} r(C[i, j])

    Within a batch every sample is reconstructed from the other n-1
    samples. Gradients are returned for both networks, for the softplus
    pre-image of beta, and for alpha (whether or not alpha is trainable).
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = np.asarray(batch, dtype=float)
    n = x.shape[0]
    if n < 1:
        raise ShapeError("se_loss: batch must contain at least one sample")

    block, cache = coefficients(model, x, x, mode=mode, mask_self=True)
    s, live, thr = cache["s"], cache["live"], cache["thr"]
    alpha = cache["alpha"]

    recon_mat = block.T @ x  # row j: sum_i C[i, j] x_i
    resid = recon_mat - x
    recon = (gamma / (2.0 * n)) * float((resid * resid).sum())
    offdiag = ~np.eye(n, dtype=bool)
    reg = float(elastic_net_reg(block[offdiag], delta).sum()) / n
    loss = recon + reg

    # d recon / d C = (gamma/n) * x @ resid.T ; d reg / d C = r'(C)/n
    g_block = (gamma / n) * (x @ resid.T) + elastic_net_reg_grad(block, delta) / n
    g_block = np.where(live, g_block, 0.0)

    g_thr = alpha * g_block
    g_alpha = float((g_block * thr).sum())
    g_s = np.where(live, g_thr, 0.0)
    g_beta = float(-(g_thr * np.sign(s) * live).sum())
    g_beta_raw = g_beta * float(sigmoid(model.beta_raw))

    if model.swap_roles:
        contrib, target = cache["key_out"], cache["query_out"]
    else:
        contrib, target = cache["query_out"], cache["key_out"]
    g_contrib = g_s @ target           # d s[i, j] / d v_i = u_j
    g_target = g_s.T @ contrib         # d s[i, j] / d u_j = v_i
    if model.swap_roles:
        g_query_out, g_key_out = g_target, g_contrib
    else:
        g_query_out, g_key_out = g_contrib, g_target

    grad_key, _ = mlp_backward(model.key_net, cache["key_cache"], g_key_out)
    grad_query, _ = mlp_backward(model.query_net, cache["query_cache"], g_query_out)

    return SELossResult(
        loss=loss, recon=recon, reg=reg, coeffs=block,
        grad_key=grad_key, grad_query=grad_query,
        grad_beta_raw=g_beta_raw, grad_alpha=g_alpha,
        grad_key_out=g_key_out, grad_query_out=g_query_out,
        key_out=cache["key_out"], query_out=cache["query_out"],
        key_cache=cache["key_cache"], query_cache=cache["query_cache"])


def se_parameter_arrays(model: SEModel) -> list[np.ndarray]:
    """Arrays updated by the main optimizer, in a fixed order."""
    arrays = numkit.mlp_param_arrays(model.key_net) + numkit.mlp_param_arrays(model.query_net)
    arrays.append(model.beta_raw)
    if model.alpha_learnable:
        arrays.append(model.alpha)
    return arrays


def se_gradient_arrays(model: SEModel, grad_key, grad_query,
                       grad_beta_raw: float, grad_alpha: float) -> list[np.ndarray]:
    """Gradient list matching se_parameter_arrays."""
    arrays = numkit.mlp_grad_arrays(grad_key) + numkit.mlp_grad_arrays(grad_query)
    arrays.append(np.array(grad_beta_raw))
    if model.alpha_learnable:
        arrays.append(np.array(grad_alpha))
    return arrays
