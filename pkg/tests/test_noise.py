import numpy as np
import pytest

from meanreflect.errors import ContractError, DataError
from meanreflect.grid import SpaceTimeGrid
from meanreflect.noise import (
    DriftField,
    NoiseSheet,
    NoiseStream,
    aggregate,
    derive_seed,
    entropy_of_drift,
    log_density,
    read_matrix_csv,
    sample_sheet,
    shift_sheet,
    write_matrix_csv,
)

GRID = SpaceTimeGrid(0.25, 32, 32)


def test_sheet_is_deterministic():
    a = sample_sheet(GRID, 42, 7)
    b = sample_sheet(GRID, 42, 7)
    assert np.array_equal(a.increments, b.increments)
    assert a.increments.shape == (GRID.nt, GRID.nx)
    assert (a.seed, a.particle_id) == (42, 7)


def test_chunked_stream_equals_single_draw():
    ids = np.arange(10)
    whole = NoiseStream(GRID, 5, ids).next_rows(GRID.nt)
    s = NoiseStream(GRID, 5, ids)
    parts = np.concatenate([s.next_rows(7), s.next_rows(20), s.next_rows(5)], axis=1)
    assert np.array_equal(whole, parts)
    with pytest.raises(ContractError):
        s.next_rows(1)


def test_stream_independent_of_workers():
    from concurrent.futures import ThreadPoolExecutor

    ids = np.arange(13)
    serial = NoiseStream(GRID, 9, ids).next_rows(GRID.nt)
    with ThreadPoolExecutor(4) as ex:
        par = NoiseStream(GRID, 9, ids).next_rows(GRID.nt, executor=ex, workers=4)
    assert np.array_equal(serial, par)


def test_stream_matches_per_particle_sheet():
    rows = NoiseStream(GRID, 3, [0, 4]).next_rows(GRID.nt)
    assert np.array_equal(rows[1], sample_sheet(GRID, 3, 4).increments)


def test_pooled_variance():
    grid = SpaceTimeGrid(1.0, 1000, 1000)
    inc = sample_sheet(grid, 1, 0).increments.ravel()
    var = grid.dt * grid.dx
    est = np.mean(inc * inc)
    se = var * np.sqrt(2.0 / inc.size)
    assert abs(est - var) <= 5 * se
    assert abs(est - var) <= 0.01 * var


def test_particles_uncorrelated():
    grid = SpaceTimeGrid(1.0, 500, 500)
    a = sample_sheet(grid, 1, 0).increments.ravel()
    b = sample_sheet(grid, 1, 1).increments.ravel()
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) <= 5 / np.sqrt(a.size)


def test_refined_sampling_aggregates_to_coarse_law():
    rows = NoiseStream(GRID, 11, np.arange(200), refine=(4, 2)).next_rows(GRID.nt)
    var = GRID.dt * GRID.dx
    est = rows.var()
    assert abs(est - var) <= 5 * var * np.sqrt(2.0 / rows.size)


def test_aggregate():
    fine = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(aggregate(fine, 2, 2), [[10, 18], [42, 50]])
    with pytest.raises(ContractError):
        aggregate(fine, 3, 1)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")


def test_entropy_examples():
    assert entropy_of_drift(DriftField.constant(0.0), GRID) == 0.0
    c = 0.5
    assert entropy_of_drift(DriftField.constant(c), GRID) == pytest.approx(0.5 * c * c * GRID.T, rel=1e-14)


def test_entropy_grid_refinement():
    coarse = SpaceTimeGrid(1.0, 64, 64)
    fine = SpaceTimeGrid(1.0, 512, 512)

    def g(s, y):
        return s * y

    h_coarse = entropy_of_drift(DriftField.from_function(coarse, g), coarse)
    h_fine = entropy_of_drift(DriftField.from_function(fine, g), fine)
    assert abs(h_coarse - h_fine) <= 1e-3 * h_fine
    assert h_fine == pytest.approx(1 / 18, rel=1e-4)


def test_entropy_homogeneity_and_nan():
    g = DriftField.from_function(GRID, lambda s, y: np.sin(3 * s) + y)
    for lam in (2.0, 0.5, 3.0):
        assert entropy_of_drift(g.scaled(lam), GRID) == pytest.approx(lam * lam * entropy_of_drift(g, GRID), rel=1e-15)
    with pytest.raises(DataError):
        DriftField(values=np.full((2, 2), np.nan))


def test_drift_shape_contract():
    with pytest.raises(ContractError):
        DriftField(values=np.zeros((3, 3))).matrix(GRID)
    with pytest.raises(ContractError):
        DriftField()


def test_shift_sheet():
    sheet = sample_sheet(GRID, 2, 0)
    assert np.array_equal(shift_sheet(sheet, DriftField.constant(0.0), GRID).increments, sheet.increments)
    g = DriftField.from_function(GRID, lambda s, y: s - y)
    back = shift_sheet(shift_sheet(sheet, g, GRID), g.scaled(-1.0), GRID)
    assert np.max(np.abs(back.increments - sheet.increments)) <= 1e-15
    grid = SpaceTimeGrid(1 / 64, 1, 64)  # dt * dx = 1/4096
    zero = NoiseSheet(np.zeros((1, 64)))
    assert np.all(shift_sheet(zero, DriftField.constant(1.0), grid).increments == 1 / 4096)
    with pytest.raises(ContractError):
        shift_sheet(NoiseSheet(np.zeros((2, 2))), g, GRID)


def test_log_density_zero_drift():
    dens = log_density(sample_sheet(GRID, 0, 0), DriftField.constant(0.0), GRID)
    assert dens.log_m.shape == (GRID.nt + 1,)
    assert np.all(dens.log_m == 0)
    assert dens.terminal == 1.0


def test_log_density_formula():
    sheet = sample_sheet(GRID, 0, 3)
    g = DriftField.from_function(GRID, lambda s, y: 1 + s * y)
    gm = g.matrix(GRID)
    dens = log_density(sheet, g, GRID)
    n = 10
    expect = np.sum(gm[:n] * sheet.increments[:n]) - 0.5 * np.sum(gm[:n] ** 2) * GRID.dt * GRID.dx
    assert dens.log_m[0] == 0.0
    assert dens.log_m[n] == pytest.approx(expect, abs=1e-13)


def _terminal_log_m(n_sheets, c, seed):
    rows = NoiseStream(GRID, seed, np.arange(n_sheets)).next_rows(GRID.nt)
    return c * rows.sum(axis=(1, 2)) - 0.5 * c * c * GRID.T, rows


def test_martingale_mean_and_log_mean():
    c = 0.5
    log_m, _ = _terminal_log_m(10_000, c, 17)
    m = np.exp(log_m)
    assert abs(m.mean() - 1) <= 3 * m.std(ddof=1) / np.sqrt(m.size)
    assert abs(log_m.mean() + 0.5 * c * c * GRID.T) <= 3 * log_m.std(ddof=1) / np.sqrt(m.size)


def test_change_of_measure_identity():
    c = 0.5
    log_m, rows = _terminal_log_m(10_000, c, 23)
    # statistic F of the Q-sheet W~ = W - g dt dx, averaged over cells
    f = (rows - c * GRID.dt * GRID.dx).mean(axis=(1, 2))
    weighted = np.exp(log_m) * f
    assert abs(weighted.mean()) <= 3 * weighted.std(ddof=1) / np.sqrt(f.size)


def test_log_density_agrees_with_vectorized_terminal():
    c = 0.5
    log_m, rows = _terminal_log_m(5, c, 31)
    for i in range(5):
        dens = log_density(NoiseSheet(rows[i]), DriftField.constant(c), GRID)
        assert dens.log_m[-1] == pytest.approx(log_m[i], abs=1e-12)


def test_csv_roundtrip(tmp_path):
    g = DriftField.from_function(GRID, lambda s, y: np.exp(s) * np.cos(7 * y) / 3)
    path = tmp_path / "g.csv"
    g.to_csv(path, GRID)
    back = DriftField.from_csv(path)
    assert np.array_equal(back.matrix(GRID), g.matrix(GRID))
    text = path.read_bytes()
    assert b"\r" not in text
    write_matrix_csv(tmp_path / "plain.csv", [[1.5, 2.0]])
    assert read_matrix_csv(tmp_path / "plain.csv").tolist() == [[1.5, 2.0]]
    (tmp_path / "bad.csv").write_text("1,2\n3,x\n")
    with pytest.raises(DataError):
        read_matrix_csv(tmp_path / "bad.csv")
