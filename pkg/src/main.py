"""
PRNU Leakage Toolkit - Command Line Interface
Brings together all components: simulation, fingerprint extraction, leakage
bounds, membership inference, ROC evaluation and mitigation
"""

import json
import sys
from pathlib import Path
from typing import Sequence

import click

# Add src directory to path
sys.path.insert(0, str(Path(__file__).parent))

from config import (Config, PrnuError, RunConfig, UsageError, exit_code_for, format_error_message,
                    log_ok, log_warn, parallel_map, write_text_atomic)
from dataset_io import (DatasetManifest, FingerprintBundle, ManifestEntry, PostProcess, load_bundle,
                        load_image, load_manifest, save_bundle, save_image, save_manifest,
                        save_preview)
from denoise import DenoiserSpec
from evaluation import (ResidualPool, auc_compare, render_roc_svg, render_trace_svg, write_auc_csv,
                        write_csv, write_roc_csv, write_scores_csv)
from fingerprint import (apply_postprocess, count_low_r, extract_fingerprint, ground_truth_metrics,
                         residual_products)
from leakage import LeakageSettings, leakage_runs
from membership import DETECTORS, score_queries
from sensor_sim import PRESETS, capture_series, gen_prnu, preset_scenes


def print_banner():
    """Print toolkit banner to stderr"""
    banner = f"""
╔════════════════════════════════════════════════════════════╗
║   PRNU Leakage Toolkit                                     ║
║   fingerprints · leakage bounds · membership inference     ║
║   Version {Config.VERSION:<49}║
╚════════════════════════════════════════════════════════════╝
"""
    click.echo(banner, err=True)


# ==================== SHARED HELPERS ====================

def _json(path: Path, payload: dict):
    write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_images(manifest: DatasetManifest, entries: Sequence[ManifestEntry], threads: int):
    return parallel_map(lambda e: load_image(manifest.resolve(e)), entries, threads,
                        desc='Loading', unit='img')


def _entry_id(entry: ManifestEntry) -> str:
    return entry.label or Path(entry.path).stem


def _denoiser(kind: str, sigma0: float, levels: int, blur_sigma: float) -> DenoiserSpec:
    # the oracle kind needs the true scenes and is library-only
    return DenoiserSpec(kind=kind, sigma0=sigma0, levels=levels, blur_sigma=blur_sigma)


def common_options(fn):
    """--seed, --threads and --out, shared by every command"""
    fn = click.option('--out', '-o', 'out', required=True,
                      type=click.Path(file_okay=False, dir_okay=True),
                      help='Output directory (created if missing).')(fn)
    fn = click.option('--threads', default=Config.THREADS, show_default=True, envvar='PRNU_THREADS',
                      type=click.IntRange(1, 256), help='Worker threads; never changes any output bit.')(fn)
    fn = click.option('--seed', default=Config.DEFAULT_SEED, show_default=True,
                      type=click.IntRange(0, (1 << 63) - 1), help='Master seed.')(fn)
    return fn


def denoiser_options(fn):
    fn = click.option('--blur-sigma', default=Config.BLUR_SIGMA, show_default=True, type=float,
                      help='Gaussian blur std (gaussian_blur denoiser).')(fn)
    fn = click.option('--levels', default=Config.WAVELET_LEVELS, show_default=True, type=int,
                      help='Wavelet decomposition levels.')(fn)
    fn = click.option('--sigma0', default=Config.WAVELET_SIGMA0, show_default=True, type=float,
                      help='Assumed noise std of the wavelet denoiser.')(fn)
    fn = click.option('--denoiser', default='wavelet_mihcak', show_default=True,
                      type=click.Choice(['wavelet_mihcak', 'gaussian_blur']),
                      help='Denoising filter.')(fn)
    return fn


class ToolkitGroup(click.Group):
    """Maps toolkit exceptions to exit codes 0/1/2/3"""

    def main(self, args=None, prog_name=None, **extra):
        extra.pop('standalone_mode', None)
        try:
            rv = super().main(args=args, prog_name=prog_name, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            sys.exit(UsageError.exit_code)
        except click.Abort:
            click.echo("Aborted", err=True)
            sys.exit(UsageError.exit_code)
        except (PrnuError, OSError) as e:
            click.echo(format_error_message(e), err=True)
            sys.exit(exit_code_for(e))
        sys.exit(rv if isinstance(rv, int) else 0)


# ==================== COMMANDS ====================

@click.group(cls=ToolkitGroup)
@click.option('--quiet', '-q', is_flag=True, help='Silence status lines and progress bars.')
@click.version_option(Config.VERSION, prog_name=Config.TOOLKIT_NAME)
def cli(quiet):
    """PRNU fingerprint leakage toolkit."""
    if quiet:
        Config.ENABLE_CONSOLE_LOGS = False
    is_valid, message = Config.validate()
    if not is_valid:
        raise UsageError(f"configuration error:\n{message}")
    if Config.ENABLE_CONSOLE_LOGS:
        print_banner()


@cli.command()
@click.option('--preset', required=True, type=click.Choice(PRESETS), help='Scene set to capture.')
@click.option('--size', default=128, show_default=True, type=click.IntRange(1, 4096),
              help='Square sensor size M = N.')
@click.option('--count', default=250, show_default=True, type=click.IntRange(1),
              help='Number of textured scenes of the pool preset.')
@click.option('--sigma-k', default=Config.SIGMA_K, show_default=True, type=click.FloatRange(0),
              help='PRNU std.')
@click.option('--sigma-n', default=Config.SIGMA_N, show_default=True, type=click.FloatRange(0),
              help='Additive noise std (luminance levels).')
@click.option('--holdout', default=0, show_default=True, type=click.IntRange(0),
              help='Last N images get the holdout role.')
@common_options
def simulate(preset, size, count, sigma_k, sigma_n, holdout, seed, threads, out):
    """Write synthetic captures, a manifest and the ground-truth PRNU."""
    run = RunConfig('simulate', dict(preset=preset, size=size, count=count, sigma_k=sigma_k,
                                     sigma_n=sigma_n, holdout=holdout, seed=seed))
    out_dir = _out_dir(out)

    scenes = preset_scenes(preset, size, size, seed, count)
    if holdout >= len(scenes):
        raise UsageError(f"--holdout {holdout} leaves no estimation images out of {len(scenes)}")
    sensor = gen_prnu(size, size, sigma_k, seed)
    captures = capture_series([X for _, X in scenes], sensor, sigma_n, seed, clip_to_8bit=True)

    image_dir = out_dir / 'images'
    image_dir.mkdir(exist_ok=True)
    entries = []
    for i, ((scene_id, _), Y) in enumerate(zip(scenes, captures)):
        name = f"{i:04d}_{scene_id}.pgm"
        save_image(Y, image_dir / name)
        role = 'holdout' if i >= len(scenes) - holdout else 'estimation'
        entries.append(ManifestEntry(path=f"images/{name}", role=role, label=f"{i:04d}_{scene_id}"))

    note = f"synthetic {preset}, {size}x{size}, sigma_k={sigma_k:g}, sigma_n={sigma_n:g}, seed={seed}"
    save_manifest(DatasetManifest(entries=entries, source_note=note), out_dir / 'manifest.json')
    save_bundle(FingerprintBundle(fingerprint=sensor.K, L=0, denoiser_id='groundtruth',
                                  creation_seed=seed), out_dir / 'groundtruth.prnu')

    warnings = []
    if sigma_k == Config.SIGMA_K or sigma_n == Config.SIGMA_N:
        warnings.append("sigma_k / sigma_n are toolkit defaults, not measured camera values")
        log_warn(warnings[-1])
    _json(out_dir / 'simulate.json', {'images': len(entries), 'holdout': holdout,
                                      'sigma_k': sigma_k, 'sigma_n': sigma_n, 'warnings': warnings})
    run.echo(out_dir)
    log_ok(f"Wrote {len(entries)} images to {image_dir}")


@cli.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--L', 'L', default=None, type=click.IntRange(1),
              help='Use the first L estimation images (default: all).')
@click.option('--epsilon-r', default=Config.EPSILON_R, show_default=True, type=float)
@click.option('--zero-mean/--no-zero-mean', default=True, show_default=True)
@click.option('--wiener/--no-wiener', default=True, show_default=True)
@click.option('--whiten', is_flag=True, help='Apply local-std whitening after post-processing.')
@click.option('--keep-R', 'keep_r', is_flag=True, help='Store the normalizer R (needed by NP).')
@click.option('--preview', is_flag=True, help='Also write an 8-bit PNG of the fingerprint.')
@click.option('--ground-truth', type=click.Path(exists=True, dir_okay=False),
              help='Ground-truth sidecar for corr/RMSE metrics.')
@denoiser_options
@common_options
def extract(manifest, L, epsilon_r, zero_mean, wiener, whiten, keep_r, preview, ground_truth,
            denoiser, sigma0, levels, blur_sigma, seed, threads, out):
    """Estimate a fingerprint bundle from the estimation images."""
    run = RunConfig('extract', dict(manifest=manifest, L=L, epsilon_r=epsilon_r, zero_mean=zero_mean,
                                    wiener=wiener, whiten=whiten, keep_R=keep_r, denoiser=denoiser,
                                    sigma0=sigma0, levels=levels, blur_sigma=blur_sigma, seed=seed))
    spec = _denoiser(denoiser, sigma0, levels, blur_sigma)
    mf = load_manifest(manifest)
    entries = mf.require_role('estimation', L or 1)
    entries = entries[:L] if L else entries
    images = _load_images(mf, entries, threads)

    bundle = extract_fingerprint(images, spec, threads=threads, epsilon_r=epsilon_r,
                                 zero_meaned=zero_mean, wiener=wiener, whitened=whiten,
                                 creation_seed=seed)
    summary = {'L': bundle.L, 'rows': bundle.shape[0], 'cols': bundle.shape[1],
               'denoiser_id': bundle.denoiser_id, 'postprocess_flags': int(bundle.flags),
               'low_r_pixels': count_low_r(bundle.normalizer, epsilon_r),
               'keep_R': keep_r}
    if ground_truth:
        truth = load_bundle(ground_truth)
        summary['ground_truth'] = ground_truth_metrics(bundle.fingerprint, truth.fingerprint)
    if not keep_r:
        bundle.normalizer = None

    out_dir = _out_dir(out)
    save_bundle(bundle, out_dir / 'fingerprint.prnu')
    if preview:
        save_preview(bundle.fingerprint, out_dir / 'fingerprint.png')
    _json(out_dir / 'extract.json', summary)
    run.echo(out_dir)
    log_ok(f"Fingerprint from L={bundle.L} images written to {out_dir / 'fingerprint.prnu'}")


@cli.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--L', 'L_values', multiple=True, type=click.IntRange(2), required=True,
              help='Estimation set size; repeat to sweep several sizes.')
@click.option('--splits', default=Config.SPLITS, show_default=True, type=click.IntRange(1))
@click.option('--window', default=Config.LOCAL_WINDOW, show_default=True, type=int)
@click.option('--gamma-method', default='local', show_default=True,
              type=click.Choice(['local', 'per_image']))
@click.option('--raw', is_flag=True, help='Measure on the estimate before zero-mean/Wiener.')
@click.option('--whiten', is_flag=True, help='Measure on the whitened estimate.')
@click.option('--epsilon-r', default=Config.EPSILON_R, show_default=True, type=float)
@click.option('--runs', default=1, show_default=True, type=click.IntRange(1),
              help='Average over this many seeded random L-subsets of the estimation images.')
@denoiser_options
@common_options
def leakage(manifest, L_values, splits, window, gamma_method, raw, whiten, epsilon_r, runs,
            denoiser, sigma0, levels, blur_sigma, seed, threads, out):
    """Information leakage bound (bits per pixel) for one or more L."""
    L_values = sorted(set(L_values))
    run = RunConfig('leakage', dict(manifest=manifest, L=L_values, runs=runs, splits=splits,
                                    window=window, gamma_method=gamma_method, raw=raw,
                                    whiten=whiten, epsilon_r=epsilon_r, denoiser=denoiser,
                                    sigma0=sigma0, levels=levels, blur_sigma=blur_sigma,
                                    seed=seed))
    spec = _denoiser(denoiser, sigma0, levels, blur_sigma)
    settings = LeakageSettings(denoiser=spec, window=window, splits=splits, seed=seed,
                               epsilon_r=epsilon_r, raw=raw, whitened=whiten,
                               gamma_method=gamma_method, threads=threads)
    mf = load_manifest(manifest)
    entries = mf.require_role('estimation', max(L_values))
    if runs == 1:
        entries = entries[:max(L_values)]
    products = residual_products(_load_images(mf, entries, threads), spec, threads=threads)

    out_dir = _out_dir(out)
    rows = []
    for L in L_values:
        result = leakage_runs(products, L, runs, settings)
        if runs == 1:
            report = result.reports[0]
            _json(out_dir / f"leakage_L{L}.json", report.to_dict())
            log_ok(f"L={L}: ILB {report.ilb_bpp:.6g} bpp, P_hat {report.P_hat:.6g}")
        else:
            _json(out_dir / f"leakage_L{L}.json", result.to_dict())
            log_ok(f"L={L}: ILB {result.mean('ilb_bpp'):.6g} ± {result.ilb_bpp_se:.2g} bpp "
                   f"over {runs} runs")
        rows.append(result)

    source = Path(manifest).parent.name
    write_csv(out_dir / 'leakage.csv',
              ('source', 'L', 'runs', 'P_hat', 'mu', 'ilb_bits', 'ilb_bpp', 'ilb_bpp_se',
               'excluded_pixels', 'P_clamped'),
              [(source, r.L, r.runs, r.mean('P_hat'), r.mean('mu'), r.mean('ilb_bits'),
                r.mean('ilb_bpp'), r.ilb_bpp_se, max(x.excluded_pixels for x in r.reports),
                any(x.P_clamped for x in r.reports)) for r in rows])
    run.echo(out_dir)


@cli.command()
@click.option('--bundle', 'bundle_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--detector', 'detectors', multiple=True, default=('NCC',), show_default=True,
              type=click.Choice(DETECTORS))
@click.option('--window', default=Config.LOCAL_WINDOW, show_default=True, type=int)
@click.option('--trace', is_flag=True, help='Also render the statistic trace as SVG.')
@click.option('--keep-prnu', is_flag=True,
              help='NP: leave the fingerprint share in the query residual.')
@denoiser_options
@common_options
def membership(bundle_path, manifest, detectors, window, trace, keep_prnu, denoiser, sigma0,
               levels, blur_sigma, seed, threads, out):
    """Score the estimation images (members, first) and the query/holdout images."""
    run = RunConfig('membership', dict(bundle=bundle_path, manifest=manifest, detectors=list(detectors),
                                       window=window, keep_prnu=keep_prnu, denoiser=denoiser,
                                       sigma0=sigma0, levels=levels, blur_sigma=blur_sigma, seed=seed))
    spec = _denoiser(denoiser, sigma0, levels, blur_sigma)
    bundle = load_bundle(bundle_path)
    if 'NP' in detectors and bundle.normalizer is None:
        raise UsageError("the NP detector needs a bundle written with extract --keep-R")

    mf = load_manifest(manifest)
    members = mf.require_role('estimation', bundle.L)[:bundle.L]
    others = [e for e in mf.entries if e.role != 'estimation']
    entries = members + others
    products = residual_products(_load_images(mf, entries, threads), spec, threads=threads)
    ids = [_entry_id(e) for e in entries]
    labels = [True] * len(members) + [False] * len(others)

    out_dir = _out_dir(out)
    scores = []
    for d in detectors:
        batch = score_queries(d, bundle.fingerprint, products, ids, R=bundle.normalizer,
                              truths=labels, window=window, threads=threads,
                              cancel_prnu=not keep_prnu)
        scores.extend(batch)
        if trace:
            render_trace_svg(batch, out_dir / f"trace_{d}.svg", title=f"{d} statistic")
    write_scores_csv(scores, out_dir / 'scores.csv')
    run.echo(out_dir)
    log_ok(f"Scored {len(entries)} images with {', '.join(detectors)}")


@cli.command()
@click.option('--manifest', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Pool of candidate images (every role).')
@click.option('--L', 'L_values', multiple=True, type=click.IntRange(1), required=True)
@click.option('--trials', default=Config.MIN_AUC_TRIALS, show_default=True, type=click.IntRange(1))
@click.option('--members', default=10, show_default=True, type=click.IntRange(0))
@click.option('--non-members', default=10, show_default=True, type=click.IntRange(1))
@click.option('--detector', 'detectors', multiple=True, default=DETECTORS, show_default=True,
              type=click.Choice(DETECTORS))
@click.option('--window', default=Config.LOCAL_WINDOW, show_default=True, type=int)
@click.option('--zero-mean/--no-zero-mean', default=False, show_default=True)
@click.option('--wiener/--no-wiener', default=False, show_default=True)
@click.option('--whiten', is_flag=True, help='Attack the whitened fingerprint.')
@click.option('--resamples', default=Config.BOOTSTRAP_RESAMPLES, show_default=True,
              type=click.IntRange(2))
@click.option('--target-fpr', default=0.05, show_default=True, type=click.FloatRange(0, 1))
@click.option('--with-ilb', is_flag=True, help='Add the ILB of the first L pool images per row.')
@click.option('--keep-prnu', is_flag=True,
              help='NP: leave the fingerprint share in the query residual.')
@denoiser_options
@common_options
def roc(manifest, L_values, trials, members, non_members, detectors, window, zero_mean, wiener,
        whiten, resamples, target_fpr, with_ilb, keep_prnu, denoiser, sigma0, levels, blur_sigma,
        seed, threads, out):
    """Monte-Carlo membership trials: ROC curves and AUC comparison."""
    L_values = sorted(set(L_values))
    detectors = tuple(dict.fromkeys(detectors))
    run = RunConfig('roc', dict(manifest=manifest, L=L_values, trials=trials, members=members,
                                non_members=non_members, detectors=list(detectors), window=window,
                                zero_mean=zero_mean, wiener=wiener, whiten=whiten,
                                resamples=resamples, target_fpr=target_fpr, with_ilb=with_ilb,
                                keep_prnu=keep_prnu, denoiser=denoiser, sigma0=sigma0,
                                levels=levels, blur_sigma=blur_sigma, seed=seed))
    spec = _denoiser(denoiser, sigma0, levels, blur_sigma)
    post = None
    if zero_mean or wiener or whiten:
        post = {'zero_meaned': zero_mean, 'wiener': wiener, 'whitened': whiten,
                'whiten_window': window}

    mf = load_manifest(manifest)
    images = _load_images(mf, mf.entries, threads)
    pool = ResidualPool(ids=[_entry_id(e) for e in mf.entries],
                        products=residual_products(images, spec, threads=threads, desc='Denoising pool'))

    settings = None
    if with_ilb:
        settings = LeakageSettings(denoiser=spec, window=window, seed=seed, threads=threads,
                                   raw=not (zero_mean or wiener), zero_meaned=zero_mean,
                                   wiener=wiener, whitened=whiten)
    rows = auc_compare(pool, L_values, detectors, trials, seed, members, non_members, post, window,
                       resamples, threads, settings, target_fpr, cancel_prnu=not keep_prnu)
    for r in rows:
        log_ok(f"L={r.L} {r.detector}: AUC {r.auc:.4f} ± {r.se:.4f}")

    out_dir = _out_dir(out)
    write_roc_csv([r.curve for r in rows], out_dir / 'roc.csv')
    write_auc_csv(rows, out_dir / 'auc.csv')
    render_roc_svg([r.curve for r in rows], out_dir / 'roc.svg', title='Membership inference ROC')
    run.echo(out_dir)


@cli.command()
@click.option('--bundle', 'bundle_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--window', default=Config.LOCAL_WINDOW, show_default=True, type=int)
@common_options
def mitigate(bundle_path, window, seed, threads, out):
    """Whiten a fingerprint by its local standard deviation."""
    run = RunConfig('mitigate', dict(bundle=bundle_path, window=window, seed=seed))
    bundle = load_bundle(bundle_path)
    if bundle.has_flag(PostProcess.WHITENED):
        log_warn("bundle is already whitened; whitening again")
    whitened = apply_postprocess(bundle, zero_meaned=False, wiener=False, whitened=True,
                                 whiten_window=window)
    out_dir = _out_dir(out)
    save_bundle(whitened, out_dir / 'fingerprint_whitened.prnu')
    run.echo(out_dir)
    log_ok(f"Whitened fingerprint written to {out_dir / 'fingerprint_whitened.prnu'}")


# ==================== ENTRY POINT ====================

def main():
    """Main entry point"""
    cli(prog_name=Config.TOOLKIT_NAME)


if __name__ == '__main__':
    main()
