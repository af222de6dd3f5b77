import numpy as np

from cqlimit import plotting
from cqlimit.generator import cnm_table
from cqlimit.phase_space import PhaseGrid, gaussian_product_state

PNG = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    with open(path, "rb") as fh:
        return fh.read(8) == PNG


def test_backend_is_agg():
    import matplotlib
    assert matplotlib.get_backend().lower() == "agg"


def test_timeseries(tmp_path):
    rows = [{"t": t, "trace": 1.0, "mean_q": t, "mean_p": -t, "var_q": 1 + t, "var_p": 1 + 2 * t,
             "min_eig": -1e-9, "peak": 0.2} for t in np.linspace(0, 1, 5)]
    assert is_png(plotting.plot_timeseries(rows, str(tmp_path / "ts.png")))


def test_marginal(tmp_path):
    g = PhaseGrid(-6, 6, 32, -6, 6, 32)
    f = gaussian_product_state(g, 0.0, 0.0, 1.0, 1.0, psi=np.array([1, 0]))
    assert is_png(plotting.plot_marginal(f, str(tmp_path / "m.png")))


def test_ensemble(tmp_path):
    rows = [{"t": t, "mean_q": t, "se_q": 0.1, "mean_p": 0.0, "se_p": 0.1, "mean_sz": 1 - t, "se_sz": 0.05}
            for t in (0.0, 0.5, 1.0)]
    assert is_png(plotting.plot_ensemble(rows, str(tmp_path / "e.png"), ["sz"]))


def test_convergence_and_cnm(tmp_path):
    assert is_png(plotting.plot_convergence([0.1, 0.05, 0.025], [1e-3, 5e-4, 2.5e-4], str(tmp_path / "c.png")))
    assert is_png(plotting.plot_cnm(cnm_table(6).tolist(), str(tmp_path / "n.png")))


def test_png_bytes_reproducible(tmp_path):
    a = plotting.plot_cnm(cnm_table(4).tolist(), str(tmp_path / "a.png"))
    b = plotting.plot_cnm(cnm_table(4).tolist(), str(tmp_path / "b.png"))
    assert open(a, "rb").read() == open(b, "rb").read()
