"""Command line: ``moviebench`` plus the standalone ``loadgen``, ``sweep`` and
``analyze`` commands.

Deployment lifecycle commands talk to the HTTP control plane
(``moviebench serve-api``). Load generation and analysis run locally
against an entry address or a span log, or through the API with ``--api``.
"""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click

DEFAULT_API = "http://127.0.0.1:8080"


def _http(api: str, method: str, path: str, body: dict | None = None, timeout: float = 3600.0) -> dict:
    import httpx

    try:
        resp = httpx.request(method, api.rstrip("/") + path, json=body, timeout=timeout)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"cannot reach control plane at {api}: {exc}") from None
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(f"{resp.status_code}: {detail}")
    return resp.json()


def _echo_json(data) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _rates(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter("rates must be comma-separated numbers") from None


def _entry(text: str):
    from .rpc import parse_address

    try:
        return parse_address(text)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _mix(text: str):
    from .loadgen import RequestMix

    try:
        return RequestMix.parse(text)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _workload(dataset: str | None, movies: int | None, users: int | None):
    from .experiments import workload_for
    from .loadgen import Workload

    wl = workload_for(dataset) if dataset else Workload()
    return Workload(movies=movies or wl.movies, users=users or wl.users)


load_options = [
    click.option("--entry", help="frontend address host:port"),
    click.option("--mix", default="browse=0.8,review=0.15,rent=0.05", show_default=True),
    click.option("--duration", type=float, default=10.0, show_default=True, help="seconds per run"),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--arrival", type=click.Choice(["poisson", "uniform"]), default="poisson", show_default=True),
    click.option("--warmup", type=float, default=5.0, show_default=True,
                 help="seconds at the start of each run left out of the statistics"),
    click.option("--timeout", type=float, default=5.0, show_default=True),
    click.option("--dataset", type=click.Path(exists=True, file_okay=False),
                 help="dataset directory; sets movie and user id ranges"),
    click.option("--movies", type=int), click.option("--users", type=int),
    click.option("--out", type=click.Path(dir_okay=False), help="CSV output path"),
    click.option("--api", help="submit through the control plane at this URL"),
    click.option("--deployment", help="deployment id (with --api)"),
]


def with_load_options(fn):
    for opt in reversed(load_options):
        fn = opt(fn)
    return fn


def _check_warmup(warmup: float, duration: float) -> float:
    if warmup >= duration:
        click.echo(f"warm-up {warmup:g}s >= duration {duration:g}s; using no warm-up", err=True)
        return 0.0
    return warmup


@click.command("loadgen")
@with_load_options
@click.option("--rate", type=float, required=True, help="offered QPS")
def loadgen_cmd(entry, mix, duration, seed, arrival, warmup, timeout, dataset, movies, users, out, api, deployment,
                rate):
    """Run one open-loop load test and report throughput and latency."""
    from .loadgen import EntryUnreachable, SweepCurve, SweepPoint, run_load_sync

    warmup = _check_warmup(warmup, duration)
    if api:
        body = {"deployment": deployment, "entry": entry, "mix": mix, "rate": rate, "duration": duration,
                "seed": seed, "arrival": arrival, "warmup": warmup, "timeout": timeout, "movies": movies,
                "users": users}
        _echo_json(_http(api, "POST", "/runs", body))
        return
    if not entry:
        raise click.UsageError("--entry is required without --api")
    try:
        r = run_load_sync(_entry(entry), _mix(mix), rate, duration, seed, arrival, warmup=warmup, timeout=timeout,
                          workload=_workload(dataset, movies, users))
    except EntryUnreachable as exc:
        raise click.ClickException(str(exc)) from None
    point = SweepPoint.from_runs(rate, [r])
    csv_text = SweepCurve([point]).to_csv()
    if out:
        Path(out).write_text(csv_text)
    click.echo(csv_text, nl=False)
    if not r.valid:
        click.echo(f"warning: scheduler lag p99 {r.lag_p99_ns / 1e6:.2f} ms exceeds 1 ms; run flagged invalid",
                   err=True)
    click.echo(f"scheduled {r.scheduled} ok {r.ok} errors {r.error_count} timeouts {r.timeout_count} "
               f"shed {r.shed_count}", err=True)


@click.command("sweep")
@with_load_options
@click.option("--rates", required=True, help="comma-separated increasing QPS values")
@click.option("--repeats", type=int, default=1, show_default=True)
@click.option("--cooldown", type=float, default=2.0, show_default=True)
@click.option("--knee-throughput", type=float, default=0.95, show_default=True)
@click.option("--knee-latency", type=float, default=10.0, show_default=True)
def sweep_cmd(entry, mix, duration, seed, arrival, warmup, timeout, dataset, movies, users, out, api, deployment,
              rates, repeats, cooldown, knee_throughput, knee_latency):
    """Run a rate sweep and emit the throughput/latency curve."""
    from .loadgen import SweepFailed, find_knee, sweep

    warmup = _check_warmup(warmup, duration)
    rate_list = _rates(rates)
    if api:
        body = {"deployment": deployment, "entry": entry, "mix": mix, "rates": rate_list, "duration": duration,
                "seed": seed, "arrival": arrival, "warmup": warmup, "timeout": timeout, "repeats": repeats,
                "cooldown": cooldown, "movies": movies, "users": users}
        data = _http(api, "POST", "/sweeps", body)
        if out:
            Path(out).write_text(data["csv"])
        click.echo(data["csv"], nl=False)
        click.echo(f"knee: {data['knee']}", err=True)
        return
    if not entry:
        raise click.UsageError("--entry is required without --api")
    try:
        curve = sweep(_entry(entry), _mix(mix), rate_list, duration, seed, repeats=repeats, cooldown=cooldown,
                      arrival=arrival, warmup=warmup, timeout=timeout, workload=_workload(dataset, movies, users),
                      on_point=lambda p: click.echo(f"{p.offered:g} QPS: achieved {p.achieved:.1f}, "
                                                    f"p99 {p.p99_us / 1e3:.2f} ms", err=True))
    except (SweepFailed, ValueError) as exc:
        raise click.ClickException(str(exc)) from None
    curve.throughput_ratio, curve.latency_factor = knee_throughput, knee_latency
    text = curve.to_csv()
    if out:
        Path(out).write_text(text)
    click.echo(text, nl=False)
    if len(curve) >= 2:
        click.echo(f"knee: {find_knee(curve)} (throughput < {knee_throughput:g}x offered or "
                   f"p99 > {knee_latency:g}x lowest-rate p99)", err=True)


@click.group("analyze")
def analyze_cmd():
    """Trace analysis over a span log."""


def _load_trees(spans: str):
    from .tracing import assemble, load_span_log

    log = load_span_log(spans)
    if log.errors:
        click.echo(f"{log.errors} malformed span line(s) skipped", err=True)
    asm = assemble(log.spans)
    if asm.orphans:
        click.echo(f"{len(asm.orphans)} orphan span(s)", err=True)
    return [t for t in asm.trees if t.root.server is None or t.root.server.operation != "Health"]


@analyze_cmd.command("breakdown")
@click.option("--spans", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--label", default="", help="load label stored in the report")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--total-time", is_flag=True, help="sum all server-span time instead of the critical path")
def analyze_breakdown(spans, label, out, total_time):
    """Per-service share of end-to-end latency."""
    from .analysis import EmptyInput, emit_report, per_service_breakdown

    try:
        b = per_service_breakdown(_load_trees(spans), label, mode="total" if total_time else "critical",
                                  skip_errors=True)
    except EmptyInput as exc:
        raise click.ClickException(str(exc)) from None
    emit_report(b, out)
    click.echo(f"{b.total_traces} traces, {b.excluded} excluded (incomplete or malformed)", err=True)


@analyze_cmd.command("split")
@click.option("--spans", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def analyze_split(spans, out):
    """Network / compute / wait fractions per service."""
    from .analysis import EmptyInput, comm_compute_split, emit_report

    try:
        rows = comm_compute_split(_load_trees(spans))
    except EmptyInput as exc:
        raise click.ClickException(str(exc)) from None
    emit_report(rows, out)


@analyze_cmd.command("shift")
@click.option("--low", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--high", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def analyze_shift(low, high, out):
    """Compare a low-load and a high-load breakdown."""
    from .analysis import compare_loads, emit_report, read_breakdown_csv

    try:
        rep = compare_loads(read_breakdown_csv(low), read_breakdown_csv(high))
    except ValueError as exc:  # a service-set mismatch or not a breakdown file
        raise click.ClickException(str(exc)) from None
    emit_report(rep, out)
    for a, b in rep.inversions:
        click.echo(f"rank inversion: {a} above {b} at low load, below at high load", err=True)


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Movie-streaming microservices benchmark."""


cli.add_command(loadgen_cmd)
cli.add_command(sweep_cmd)
cli.add_command(analyze_cmd)


@cli.command("dataset")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("-n", "--count", "n", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--video-mib", type=int, default=50, show_default=True)
@click.option("--video-pool", type=int, default=2, show_default=True)
def dataset_cmd(out_dir, n, seed, video_mib, video_pool):
    """Generate a synthetic dataset directory."""
    from .dataset import InvalidCount, generate_dataset

    try:
        ds = generate_dataset(n, seed, out_dir, video_bytes=video_mib << 20, video_pool=video_pool)
    except InvalidCount as exc:
        raise click.BadParameter(str(exc)) from None
    click.echo(f"{ds.root}: {ds.n} movies, checksum {ds.checksum}")


@cli.command("topology")
@click.argument("path", required=False, type=click.Path(exists=True, dir_okay=False))
def topology_cmd(path):
    """Validate a topology file (the shipped default if none given)."""
    from .topology import TopologyError, load_topology, validate

    try:
        t = load_topology(path)
    except TopologyError as exc:
        raise click.ClickException(str(exc)) from None
    issues = validate(t)
    for issue in issues:
        click.echo(f"{issue.kind}: {issue.reason}", err=True)
    if issues:
        sys.exit(1)
    click.echo(f"{len(t.services)} services, {len(t.edges)} edges, entry {t.entry}")


@cli.command("collector")
@click.option("--log", "log_path", required=True, type=click.Path(dir_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=9000, show_default=True)
def collector_cmd(log_path, host, port):
    """Run a span collector in the foreground."""
    from .collector import main

    main(["--log", log_path, "--host", host, "--port", str(port)])


@cli.command("serve-api")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
def serve_api_cmd(host, port):
    """Run the HTTP control plane."""
    from .api import main

    main(host, port)


@cli.command("deploy")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", type=click.Choice(["process", "group", "monolith"]), default="process", show_default=True)
@click.option("--topology", type=click.Path(exists=True, dir_okay=False))
@click.option("--no-trace", is_flag=True)
@click.option("--base-port", type=int)
@click.option("--collector", help="existing collector host:port")
@click.option("--api", default=DEFAULT_API, show_default=True)
def deploy_cmd(dataset, mode, topology, no_trace, base_port, collector, api):
    """Launch a deployment through the control plane."""
    body = {"dataset": str(Path(dataset).resolve()), "mode": mode, "tracing": not no_trace,
            "topology": str(Path(topology).resolve()) if topology else None, "base_port": base_port,
            "collector": collector}
    _echo_json(_http(api, "POST", "/deployments", body))


@cli.command("status")
@click.argument("deployment", required=False)
@click.option("--api", default=DEFAULT_API, show_default=True)
def status_cmd(deployment, api):
    """List deployments, or show one deployment's per-service counters."""
    if deployment:
        _echo_json(_http(api, "GET", f"/deployments/{deployment}/stats"))
    else:
        _echo_json(_http(api, "GET", "/deployments"))


@cli.command("slowdown")
@click.argument("deployment")
@click.argument("profile", nargs=-1, required=True)
@click.option("--api", default=DEFAULT_API, show_default=True)
def slowdown_cmd(deployment, profile, api):
    """Set per-service slowdown factors (store=0.5 cache=0.25, or all=0.5)."""
    pairs = {}
    for item in profile:
        name, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected service=factor, got {item!r}")
        try:
            pairs[name] = float(value)
        except ValueError:
            raise click.BadParameter(f"bad factor in {item!r}") from None
    if "all" in pairs:
        info = _http(api, "GET", f"/deployments/{deployment}")
        factor = pairs.pop("all")
        pairs = {**{n: factor for n in info["services"]}, **pairs}
    _echo_json(_http(api, "POST", f"/deployments/{deployment}/slowdown", {"profile": pairs}))


@cli.command("tracing")
@click.argument("deployment")
@click.argument("state", type=click.Choice(["on", "off"]))
@click.option("--api", default=DEFAULT_API, show_default=True)
def tracing_cmd(deployment, state, api):
    """Switch span recording on or off."""
    _echo_json(_http(api, "POST", f"/deployments/{deployment}/tracing", {"enabled": state == "on"}))


@cli.command("teardown")
@click.argument("deployment")
@click.option("--deadline", type=float, default=5.0, show_default=True)
@click.option("--api", default=DEFAULT_API, show_default=True)
def teardown_cmd(deployment, deadline, api):
    """Drain, flush spans and stop a deployment; prints the span counters."""
    _echo_json(_http(api, "DELETE", f"/deployments/{deployment}?deadline={deadline}"))


@cli.command("up")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", type=click.Choice(["process", "group", "monolith"]), default="process", show_default=True)
@click.option("--topology", type=click.Path(exists=True, dir_okay=False))
@click.option("--workdir", type=click.Path(file_okay=False), default="moviebench-run", show_default=True)
@click.option("--no-trace", is_flag=True)
def up_cmd(dataset, mode, topology, workdir, no_trace):
    """Launch collector and deployment in the foreground, without the API; Ctrl-C stops."""
    from .deploy import kill_all, launch, shutdown, start_collector
    from .topology import load_topology

    workdir = Path(workdir).resolve()
    col = start_collector(workdir / "spans" / "spans.log")
    try:
        h = launch(load_topology(topology), col.address, dataset, workdir / "deploy", mode=mode,
                   tracing=not no_trace, ready_timeout=30.0)
    except Exception:
        col.stop()
        raise
    click.echo(f"entry {h.entry[0]}:{h.entry[1]}  spans {col.log_path}")
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        summary = shutdown(h)
        kill_all(h)
        col.stop()
        _echo_json({"services": summary.services, "forced_kills": summary.forced_kills})


def main() -> None:
    cli()


def loadgen_main() -> None:
    loadgen_cmd()


def sweep_main() -> None:
    sweep_cmd()


def analyze_main() -> None:
    analyze_cmd()


if __name__ == "__main__":
    main()
