"""Reference solutions: logit QRE, best responses, Nash points and the cobweb rational price."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import (
    CobwebConfig,
    CournotConfig,
    MatrixGameConfig,
    SupplyChainConfig,
    cobweb_supply,
    cournot_price,
    supply_chain_step,
)


class EquilibriumError(RuntimeError):
    """Solver failed (no convergence, cycling, or the game is outside its domain)."""

    def __init__(self, msg: str, residual: float | None = None):
        super().__init__(msg)
        self.residual = residual


def expected_payoffs(game: MatrixGameConfig, player: int, dists) -> np.ndarray:
    """Expected payoff of each own action when the others mix according to ``dists``."""
    u = game.payoffs[player]
    # contract opponents from the last axis down so axis numbers stay valid
    for j in range(game.n_players - 1, -1, -1):
        if j != player:
            u = np.tensordot(u, np.asarray(dists[j], dtype=float), axes=([j], [0]))
    return u


def logit_response(utilities: np.ndarray, lam: float) -> np.ndarray:
    z = np.asarray(utilities, dtype=float) / lam
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class QreSolution:
    dists: list[np.ndarray]
    lam: float
    iterations: int
    residual: float


def _qr_map(game, dists, lam):
    return [logit_response(expected_payoffs(game, i, dists), lam) for i in range(game.n_players)]


def logit_qre(game: MatrixGameConfig, lam: float, tol: float = 1e-10, max_iter: int = 100_000,
              damping: float = 0.5, init=None) -> QreSolution:
    """Damped fixed-point iteration of the logit quantal-response map.

    ``pi <- (1 - damping) * pi + damping * QR(pi)`` until ``max|QR(pi) - pi| < tol``.

    Raises:
        ValueError: ``lam <= 0`` (use :func:`best_response`) or bad damping.
        EquilibriumError: no convergence within ``max_iter``; carries the residual.
    """
    if not lam > 0:
        raise ValueError("lam must be > 0; use best_response for the rational limit")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if init is None:
        dists = [np.full(n, 1.0 / n) for n in game.n_actions]
    else:
        dists = [np.asarray(d, dtype=float) for d in init]
    residual = np.inf
    for it in range(1, max_iter + 1):
        target = _qr_map(game, dists, lam)
        residual = max(float(np.abs(t - d).max()) for t, d in zip(target, dists))
        if residual < tol:
            return QreSolution(dists, lam, it, residual)
        dists = [(1 - damping) * d + damping * t for d, t in zip(dists, target)]
    raise EquilibriumError(f"logit QRE did not converge in {max_iter} iterations "
                           f"(residual {residual:.3e})", residual)


@dataclass
class BestResponse:
    action: int
    ties: tuple[int, ...]
    payoffs: np.ndarray

    @property
    def is_tie(self) -> bool:
        return len(self.ties) > 1

    def as_distribution(self) -> np.ndarray:
        d = np.zeros(len(self.payoffs))
        d[self.action] = 1.0
        return d


def best_response(game: MatrixGameConfig, opponent_dists, player: int = 0, atol: float = 1e-12) -> BestResponse:
    """Pure best response of ``player``; ties resolve to the lowest index and are listed.

    ``opponent_dists`` holds one distribution per *other* player, in player order.
    """
    opp = list(opponent_dists)
    if len(opp) != game.n_players - 1:
        raise ValueError(f"need {game.n_players - 1} opponent distributions")
    for d in opp:
        if np.any(np.asarray(d) < 0) or abs(float(np.sum(d)) - 1) > 1e-9:
            raise ValueError("opponent distributions must be probability vectors")
    dists = opp[:player] + [None] + opp[player:]
    u = expected_payoffs(game, player, dists)
    ties = tuple(int(k) for k in np.flatnonzero(u >= u.max() - atol))
    return BestResponse(ties[0], ties, u)


# ----------------------------------------------------------------------- games


def cournot_best_responses(cfg: CournotConfig, others_total: float) -> tuple[int, ...]:
    """All grid quantities maximising profit against the rivals' total output."""
    q = np.arange(cfg.q_lo, cfg.q_hi + 1)
    p, _ = cournot_price(cfg, (q + others_total)[:, None])
    u = p * q
    return tuple(int(v) for v in q[u >= u.max() - 1e-12])


def cournot_nash(cfg: CournotConfig) -> int:
    """Symmetric strict pure Nash quantity on the integer grid.

    Every symmetric profile is tested by a best-response check against ``firms - 1``
    rivals at the same quantity.  Plain best-response iteration is not used since
    it cycles (``q -> 30 - q``) for the triopoly.  With the zero price floor, large
    outputs form weak equilibria where every deviation also earns nothing; only
    profiles where ``q`` is the unique best response count.

    Raises:
        EquilibriumError: no symmetric equilibrium, or more than one.
    """
    fixed = [q for q in range(cfg.q_lo, cfg.q_hi + 1)
             if cournot_best_responses(cfg, (cfg.firms - 1) * q) == (q,)]
    if len(fixed) != 1:
        raise EquilibriumError(f"expected a unique symmetric equilibrium, found {fixed}")
    return fixed[0]


def supply_chain_payoff_curve(cfg: SupplyChainConfig, opponent_request: int) -> np.ndarray:
    """Utility of every request ``1..X`` against rivals all requesting ``opponent_request``."""
    x = np.arange(1, cfg.max_request + 1, dtype=float)
    reqs = np.column_stack([x] + [np.full_like(x, opponent_request)] * (cfg.retailers - 1))
    return supply_chain_step(cfg, reqs)[1][:, 0]


def supply_chain_nash(cfg: SupplyChainConfig) -> int:
    """Maximum request ``X``: the equilibrium whenever capacity is short (``K < I*D``)."""
    if not cfg.capacity < cfg.retailers * cfg.demand:
        raise EquilibriumError("capacity is not limited (K >= I*D); maximal requests are not the equilibrium")
    return cfg.max_request


def cobweb_excess(cfg: CobwebConfig, p):
    """``a - b p - sum_k S(p)``: demand minus supply when every producer predicts ``p``."""
    return cfg.a - cfg.b * p - cobweb_supply(cfg, np.full(cfg.producers, p)).sum()


def cobweb_rational_price(cfg: CobwebConfig, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Bisection for the shock-free fixed point ``a - b p = sum_k S(p)`` on the price range."""
    lo, hi = cfg.price_lo, cfg.price_hi
    f_lo, f_hi = cobweb_excess(cfg, lo), cobweb_excess(cfg, hi)
    if f_lo * f_hi > 0:
        raise EquilibriumError(f"no sign change of the excess demand on [{lo}, {hi}]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = cobweb_excess(cfg, mid)
        if abs(f_mid) < tol and hi - lo < tol:
            return mid
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    res = abs(cobweb_excess(cfg, mid))
    if res >= tol:
        raise EquilibriumError(f"bisection stalled with residual {res:.3e}", res)
    return mid
