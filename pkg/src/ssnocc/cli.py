"""`ssnocc` command line: simulate, fit, predict, diagnose.

Exit codes: 0 success, 1 diagnostic failure, 2 usage error, 3 data error.
"""

from __future__ import annotations

import math
import os
import warnings
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import diagnostics, io
from .covariance import cholesky_lower, tail_down_corr
from .inference import SamplerConfig, monitored, run_chains
from .model import (DEFAULT_SIGMA_MAX, DesignMatrix, OccupancyModel, Priors,
                    inverse_logit)
from .network import NetworkError, distance_tables, validate_network
from .simulation import SimulationDesign, generate_network, simulate_dataset


class DataError(click.ClickException):
    exit_code = 3


def _positive_int(name):
    def check(ctx, param, value):
        if value is not None and value < 1:
            raise click.UsageError(f"--{name} must be a positive integer")
        return value

    return check


def _resolve_seed(seed):
    env = os.environ.get("SSNOCC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise click.UsageError("SSNOCC_SEED must be an integer")
    return seed


def _default_workers(requested, jobs):
    if requested is not None:
        return max(1, requested)
    return max(1, min(os.cpu_count() or 1, jobs))


@click.group()
def main():
    """Spatial stream network occupancy models."""


@main.command("simulate")
@click.option("--sites", default=100, show_default=True, callback=_positive_int("sites"))
@click.option("--visits", default=5, show_default=True, callback=_positive_int("visits"))
@click.option("--replicates", default=1, show_default=True,
              callback=_positive_int("replicates"))
@click.option("--seed", default=42, show_default=True)
@click.option("--beta0", default=0.5, show_default=True)
@click.option("--beta1", default=1.0, show_default=True)
@click.option("--p", "det_p", default=0.6, show_default=True)
@click.option("--sigma2", default=2.0, show_default=True)
@click.option("--theta", default=10.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def cmd_simulate(sites, visits, replicates, seed, beta0, beta1, det_p, sigma2, theta, out):
    """Generate random networks and occupancy/detection data."""
    if not (0 < det_p <= 1):
        raise click.UsageError("--p must lie in (0, 1]")
    if sigma2 < 0 or theta <= 0:
        raise click.UsageError("--sigma2 must be >= 0 and --theta > 0")
    seed = _resolve_seed(seed)
    started = datetime.now(timezone.utc)
    out_dir = Path(out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise click.UsageError(f"cannot create output directory: {exc}")

    design = SimulationDesign(
        n_sites=sites, n_visits=visits, n_replicates=replicates,
        true_beta=(beta0, beta1), true_p=det_p, true_sigma2=sigma2,
        true_theta=theta, network_seed=seed, data_seed=seed + 500009,
    )
    for r in range(replicates):
        rep_dir = out_dir if replicates == 1 else out_dir / f"rep{r:03d}"
        rep_dir.mkdir(parents=True, exist_ok=True)
        net_rng = np.random.default_rng(design.network_seed + r)
        data_rng = np.random.default_rng(design.data_seed + r)
        net, placements = generate_network(sites, net_rng)
        histories, truth, _ = simulate_dataset(design, net, placements, data_rng)
        io.write_network(rep_dir / "network.csv", net)
        io.write_sites(rep_dir / "sites.csv", placements)
        io.write_detections(rep_dir / "detections.csv", histories)
        io.write_truth(rep_dir / "truth.csv", [s.site_id for s in placements], truth)
    io.write_manifest(
        out_dir, "simulate",
        config={"sites": sites, "visits": visits, "replicates": replicates,
                "beta": [beta0, beta1], "p": det_p, "sigma2": sigma2, "theta": theta},
        inputs={}, seeds={"seed": seed, "network_seed": design.network_seed,
                          "data_seed": design.data_seed},
        started=started,
    )
    click.echo(f"wrote {replicates} replicate(s) to {out_dir}")


def _load_fit_inputs(network, sites_path, detections, covariates, covariate_columns,
                     standardize):
    try:
        net = io.read_network(network)
        placements = io.read_sites(sites_path)
        histories = io.read_detections(detections)
    except io.DataFileError as exc:
        raise DataError(str(exc))
    report = validate_network(net)
    if not report.ok:
        raise DataError(f"invalid network: {'; '.join(report.violations)}")

    site_ids = [s.site_id for s in placements]
    hist_ids = {h.site_id for h in histories}
    missing = sorted(set(site_ids) - hist_ids)
    unknown = sorted(hist_ids - set(site_ids))
    if missing or unknown:
        raise DataError(
            f"site mismatch between files: missing detections for {missing}, "
            f"detections for unknown sites {unknown}"
        )

    transform = {}
    if covariates:
        cols = covariate_columns.split(",") if covariate_columns else None
        try:
            names, table = io.read_covariates(covariates, cols)
        except io.DataFileError as exc:
            raise DataError(str(exc))
        absent = [sid for sid in site_ids if sid not in table]
        if absent:
            raise DataError(f"site mismatch: no covariates for {absent}")
        raw = np.array([table[sid] for sid in site_ids])
        if standardize:
            mean = raw.mean(axis=0)
            sd = raw.std(axis=0, ddof=0)
            sd[sd == 0] = 1.0
            raw = (raw - mean) / sd
            transform = {
                n: {"mean": float(m), "sd": float(s)}
                for n, m, s in zip(names, mean, sd)
            }
        X = DesignMatrix(np.column_stack([np.ones(len(site_ids)), raw]), tuple(names))
    else:
        X = DesignMatrix(np.ones((len(site_ids), 1)), ())

    try:
        dist = distance_tables(net, placements)
    except NetworkError as exc:
        raise DataError(str(exc))
    return net, placements, histories, X, dist, transform


@main.command("fit")
@click.option("--network", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--sites", "sites_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--detections", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--covariates", type=click.Path(exists=True, dir_okay=False))
@click.option("--covariate-columns", help="comma-separated subset of covariate columns")
@click.option("--model", "model_kind", default="taildown", show_default=True,
              type=click.Choice(["taildown", "nonspatial"]))
@click.option("--chains", default=2, show_default=True, callback=_positive_int("chains"))
@click.option("--iters", default=15000, show_default=True, callback=_positive_int("iters"))
@click.option("--burnin", default=5000, show_default=True)
@click.option("--thin", default=1, show_default=True, callback=_positive_int("thin"))
@click.option("--seed", default=42, show_default=True)
@click.option("--sigma-max", default=DEFAULT_SIGMA_MAX, show_default=True)
@click.option("--standardize/--no-standardize", default=True, show_default=True)
@click.option("--workers", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
def cmd_fit(network, sites_path, detections, covariates, covariate_columns, model_kind,
            chains, iters, burnin, thin, seed, sigma_max, standardize, workers, out):
    """Fit the occupancy model by MCMC and write draws + summary."""
    if not (0 <= burnin < iters):
        raise click.UsageError("--burnin must satisfy 0 <= burnin < iters")
    seed = _resolve_seed(seed)
    started = datetime.now(timezone.utc)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    net, placements, histories, X, dist, transform = _load_fit_inputs(
        network, sites_path, detections, covariates, covariate_columns, standardize
    )
    priors = Priors.from_distances(dist, sigma_max=sigma_max)
    model = OccupancyModel(X, histories, dist, priors,
                          spatial=model_kind == "taildown")
    config = SamplerConfig(n_chains=chains, n_iterations=iters, n_burnin=burnin,
                           thin=thin, seed=seed)
    chain_draws, summary = run_chains(
        model, config, workers=_default_workers(workers, chains)
    )
    io.write_draws(out_dir / "draws.csv", chain_draws)

    report = {
        name: {
            "mean": f"{entry['mean']:.2f}",
            "ci95": f"({entry['q2.5']:.2f}, {entry['q97.5']:.2f})",
        }
        for name, entry in summary.parameters.items()
        if "[" not in name
    }
    from .inference import convergence_ok

    summary_dict = io.summary_to_dict(
        summary, config,
        extra={
            "model": model_kind,
            "covariate_names": list(X.covariate_names),
            "standardization": transform,
            "report": report,
            "converged": convergence_ok(summary),
        },
    )
    io.write_summary(out_dir / "summary.json", summary_dict)
    io.write_manifest(
        out_dir, "fit",
        config={"model": model_kind, "chains": chains, "iters": iters,
                "burnin": burnin, "thin": thin, "sigma_max": sigma_max,
                "standardize": standardize},
        inputs={k: v for k, v in [("network", network), ("sites", sites_path),
                                  ("detections", detections),
                                  ("covariates", covariates)] if v},
        seeds={"seed": seed},
        started=started,
        extra={"prior_bounds": summary.prior_bounds,
               "standardization": transform},
    )
    click.echo(f"fit complete; draws and summary in {out_dir}")


@main.command("predict")
@click.option("--fit", "fit_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--network", type=click.Path(exists=True, dir_okay=False))
@click.option("--sites", "sites_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--new-sites", type=click.Path(exists=True, dir_okay=False),
              help="CSV: site_id,edge_id,dist_to_downstream_km[,covariate...]")
@click.option("--seed", default=7, show_default=True)
@click.option("--out", required=True, type=click.Path())
def cmd_predict(fit_dir, network, sites_path, new_sites, seed, out):
    """Posterior occupancy summaries at observed and, optionally, new sites."""
    seed = _resolve_seed(seed)
    started = datetime.now(timezone.utc)
    fit_dir = Path(fit_dir)
    draws_path = fit_dir / "draws.csv"
    if not draws_path.exists():
        raise DataError(f"missing draws file {draws_path}")
    names, chain_arrays = io.read_draws(draws_path)
    flat = np.concatenate(chain_arrays, axis=0) if chain_arrays else np.empty((0, len(names)))
    if flat.shape[0] == 0:
        raise click.UsageError("no retained posterior draws in fit directory")

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    psi_cols = [(n[4:-1], j) for j, n in enumerate(names) if n.startswith("psi[")]
    rows = []
    for sid, j in psi_cols:
        col = flat[:, j]
        rows.append([sid, float(col.mean()),
                     float(np.quantile(col, 0.025)), float(np.quantile(col, 0.975))])
    _write_prediction_csv(out_dir / "predictions.csv", rows)

    inputs = {"draws": str(draws_path)}
    if new_sites:
        if not (network and sites_path):
            raise click.UsageError("--new-sites requires --network and --sites")
        rows_new = _predict_new_sites(fit_dir, names, flat, network, sites_path,
                                      new_sites, seed)
        _write_prediction_csv(out_dir / "predictions_new.csv", rows_new)
        inputs.update({"network": network, "sites": sites_path, "new_sites": new_sites})

    io.write_manifest(out_dir, "predict", config={}, inputs=inputs,
                      seeds={"seed": seed}, started=started)
    click.echo(f"predictions written to {out_dir}")


def _write_prediction_csv(path, rows):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "psi_mean", "psi_q2.5", "psi_q97.5"])
        for sid, m, lo, hi in rows:
            w.writerow([sid, format(m, ".17g"), format(lo, ".17g"), format(hi, ".17g")])


def _predict_new_sites(fit_dir, names, flat, network, sites_path, new_sites, seed):
    import csv
    import json

    from .network import SitePlacement

    try:
        net = io.read_network(network)
        observed = io.read_sites(sites_path)
    except io.DataFileError as exc:
        raise DataError(str(exc))

    with open(fit_dir / "summary.json", encoding="utf-8") as fh:
        summary = json.load(fh)
    cov_names = summary.get("covariate_names", [])
    transform = summary.get("standardization", {})
    spatial = summary.get("model", "taildown") == "taildown"

    with open(new_sites, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = io.SITES_HEADER + cov_names
        if header != expected:
            raise DataError(f"{new_sites}: expected header {expected}, got {header}")
        new_rows = list(reader)
    if not new_rows:
        raise DataError(f"{new_sites}: no new sites")

    new_placements, x_new = [], []
    for row in new_rows:
        new_placements.append(SitePlacement(row[0], row[1], float(row[2])))
        vals = [float(v) for v in row[3:]]
        for k, name in enumerate(cov_names):
            t = transform.get(name)
            if t:
                vals[k] = (vals[k] - t["mean"]) / t["sd"]
        x_new.append([1.0] + vals)
    x_new = np.array(x_new)

    try:
        dist = distance_tables(net, observed + new_placements)
    except NetworkError as exc:
        raise DataError(str(exc))

    col = {n: j for j, n in enumerate(names)}
    n_beta = x_new.shape[1]
    beta_cols = [col[f"beta{k}"] for k in range(n_beta)]
    n_obs = len(observed)
    rng = np.random.default_rng(seed)
    psi_draws = np.empty((flat.shape[0], len(new_placements)))
    if spatial:
        u_cols = [col[f"u[{s.site_id}]"] for s in observed]
        for d in range(flat.shape[0]):
            sigma, theta = flat[d, col["sigma"]], flat[d, col["theta"]]
            R = tail_down_corr(dist, theta)
            R_oo, R_no = R[:n_obs, :n_obs], R[n_obs:, :n_obs]
            L_oo, _ = cholesky_lower(R_oo)
            tau_obs = sigma * (L_oo @ flat[d, u_cols])
            # conditional normal of the new-site field given the observed field
            alpha = np.linalg.solve(R_oo, R_no.T)
            mean = alpha.T @ tau_obs
            cond = R[n_obs:, n_obs:] - R_no @ alpha
            L_c, _ = cholesky_lower(sigma**2 * cond)
            tau_new = mean + L_c @ rng.standard_normal(len(new_placements))
            eta = x_new @ flat[d, beta_cols] + tau_new
            psi_draws[d] = inverse_logit(eta)
    else:
        for d in range(flat.shape[0]):
            psi_draws[d] = inverse_logit(x_new @ flat[d, beta_cols])

    rows = []
    for k, s in enumerate(new_placements):
        colv = psi_draws[:, k]
        rows.append([s.site_id, float(colv.mean()),
                     float(np.quantile(colv, 0.025)), float(np.quantile(colv, 0.975))])
    return rows


@main.command("diagnose")
@click.option("--fit", "fit_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path())
@click.option("--rhat-max", default=1.1, show_default=True)
@click.option("--ess-min", default=100.0, show_default=True)
@click.pass_context
def cmd_diagnose(ctx, fit_dir, out, rhat_max, ess_min):
    """Convergence tables and trace series; exit 1 on threshold breach."""
    import csv

    fit_dir = Path(fit_dir)
    draws_path = fit_dir / "draws.csv"
    if not draws_path.exists():
        raise DataError(f"missing draws file {draws_path}")
    names, chain_arrays = io.read_draws(draws_path)
    out_dir = Path(out) if out else fit_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    watch = monitored(names)
    failed = False
    with open(out_dir / "diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "rhat", "ess", "mean", "sd", "q2.5", "q97.5"])
        for name in watch:
            j = names.index(name)
            draws = np.stack([c[:, j] for c in chain_arrays])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", diagnostics.ConstantChainWarning)
                r = diagnostics.rhat(draws) if len(chain_arrays) > 1 else float("nan")
                e = diagnostics.ess(draws)
            flat = draws.ravel()
            w.writerow([
                name, format(r, ".6g"), format(e, ".6g"),
                format(flat.mean(), ".6g"), format(flat.std(ddof=1), ".6g"),
                format(np.quantile(flat, 0.025), ".6g"),
                format(np.quantile(flat, 0.975), ".6g"),
            ])
            if (not math.isnan(r) and r >= rhat_max) or e <= ess_min:
                failed = True

    with open(out_dir / "traces.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "chain", "iteration", "value"])
        for name in watch:
            j = names.index(name)
            for c, arr in enumerate(chain_arrays):
                for it, v in enumerate(arr[:, j]):
                    w.writerow([name, c, it, format(v, ".6g")])
    click.echo(f"diagnostics written to {out_dir}")
    if failed:
        ctx.exit(1)


if __name__ == "__main__":
    main()
