"""Figures written next to the CSV outputs (non-interactive Agg backend)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_timeseries(rows, path):
    """Trace, means, variances and positivity of an evolve run."""
    t = np.array([r["t"] for r in rows])
    fig, ax = plt.subplots(2, 2, figsize=(9, 6))
    ax[0, 0].plot(t, [r["trace"] - 1 for r in rows], "o-")
    ax[0, 0].set_title("trace - 1")
    ax[0, 1].plot(t, [r["mean_q"] for r in rows], "o-", label="<q>")
    ax[0, 1].plot(t, [r["mean_p"] for r in rows], "s-", label="<p>")
    ax[0, 1].legend()
    ax[0, 1].set_title("means")
    ax[1, 0].plot(t, [r["var_q"] for r in rows], "o-", label="Var q")
    ax[1, 0].plot(t, [r["var_p"] for r in rows], "s-", label="Var p")
    ax[1, 0].legend()
    ax[1, 0].set_title("variances")
    ax[1, 1].plot(t, [r["min_eig"] / r["peak"] for r in rows], "o-")
    ax[1, 1].set_title("min eigenvalue / peak density")
    for a in ax.flat:
        a.set_xlabel("t")
    return _save(fig, path)


def plot_marginal(field, path):
    """Classical marginal tr rho(q, p) as an image."""
    g = field.grid
    dens = np.real(np.trace(field.data, axis1=-2, axis2=-1))
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(dens.T, origin="lower", aspect="auto",
                   extent=(g.q[0], g.q[-1], g.p[0], g.p[-1]), cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel("q")
    ax.set_ylabel("p")
    ax.set_title("classical marginal")
    return _save(fig, path)


def plot_ensemble(rows, path, observables=()):
    """Ensemble means with 3 standard-error bands."""
    t = np.array([r["t"] for r in rows])
    names = ["q", "p"] + list(observables)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        m = np.array([r["mean_" + name] for r in rows])
        se = np.array([r["se_" + name] for r in rows])
        ax.plot(t, m, "o-")
        ax.fill_between(t, m - 3 * se, m + 3 * se, alpha=0.3)
        ax.set_title("<%s>" % name)
        ax.set_xlabel("t")
    return _save(fig, path)


def plot_convergence(taus, errors, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(taus, errors, "o-", label="L1 error")
    ref = np.asarray(taus) * errors[0] / taus[0]
    ax.loglog(taus, ref, "--", label="slope 1")
    ax.set_xlabel("tau")
    ax.set_ylabel("L1 distance")
    ax.legend()
    return _save(fig, path)


def plot_cnm(table, path):
    arr = np.array(table, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    lim = np.abs(arr).max() or 1.0
    im = ax.imshow(np.sign(arr) * np.log1p(np.abs(arr)), cmap="RdBu", vmin=-np.log1p(lim), vmax=np.log1p(lim))
    fig.colorbar(im, ax=ax, label="sign * log(1 + |C_nm|)")
    ax.set_xlabel("m")
    ax.set_ylabel("n")
    return _save(fig, path)
