# app/cli.py
"""
Interfaz de línea de comandos

Subcomandos:
    phantom   crea un PropertyMap (.pvol) desde un preset o un JSON de figuras
    synth     sintetiza un contraste a partir de un PropertyMap
    fit       ajusta (PD, T1, T2) por voxel a partir de contrastes co-registrados
    fuse      producto de expertos de archivos .gauss
    scale     escala un volumen a [-1, 1] por percentil (o lo revierte)
    diffuse   data | train | sample: difusión de juguete sobre latentes .latn
    metrics   MSE, MAE, PSNR y MS-SSIM entre dos volúmenes
    validate  medianas de T1/T2 contra medianas de referencia (CSV)

Códigos de salida: 0 éxito, 2 uso o validación, 3 error de ejecución
(p. ej. voxeles sin convergencia con --strict). Los tiempos se dan en segundos.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from app import diffusion, fusion, metrics, storage
from app.core import AcquisitionParams, ScaleRecord, scale_to_unit, unscale
from app.logging_formatter import apply_logging_settings
from app.phantom import PhantomSpec, brain2d_spec, make_phantom, region_masks
from app.qmap import FitConfig, fit_volume
from app.signal_models import SignalOptions, synthesize
from app.utils import (check_seconds, load_input_meta, load_reference_medians, parse_dims, parse_input_binding,
                       setup_app_config)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


# =============================================================================
# Comandos
# =============================================================================
def cmd_phantom(args, config: dict) -> int:
    dims = parse_dims(args.dims)
    if args.spec:
        spec = PhantomSpec.from_json(args.spec, dims)
    else:
        spec = PhantomSpec.preset(args.preset, dims, config.get("phantom", {}).get(args.preset))
    props = make_phantom(spec)
    storage.write_volume(args.out, props)
    logger.info("Fantoma escrito en %s", args.out)
    print(f"phantom dims={list(props.dims)} channels={list(props.channel_names)} shapes={len(spec.shapes)}")
    return EXIT_OK


def cmd_synth(args, config: dict) -> int:
    max_seconds = float(config["cli"]["max_seconds"])
    for name in ("te", "tr", "ti"):
        check_seconds(name, getattr(args, name), max_seconds)
    params = AcquisitionParams(args.seq, args.te, args.tr, args.ti)
    signal_section = dict(config.get("signal", {}))
    if args.magnitude:
        signal_section["magnitude_mode"] = True
    opts = SignalOptions.from_mapping(signal_section)
    props = storage.read_property_map(args.props)
    volume = synthesize(props, params, opts, noise_sigma=args.noise_sigma, seed=args.seed)
    storage.write_volume(args.out, volume)
    print(f"synth {params.sequence.value} te={params.te} tr={params.tr} ti={params.ti} "
          f"min={volume.data.min():.6g} max={volume.data.max():.6g}")
    return EXIT_OK


def _fit_bindings(args, config: dict):
    max_seconds = float(config["cli"]["max_seconds"])
    bindings = []
    if args.meta:
        bindings += load_input_meta(args.meta, max_seconds)
    for text in args.inputs or []:
        bindings.append(parse_input_binding(text, max_seconds))
    if not bindings:
        raise ValueError("fit requiere al menos una entrada (--inputs o --meta).")
    return [(storage.read_volume(path), params) for path, params in bindings]


def cmd_fit(args, config: dict) -> int:
    images = _fit_bindings(args, config)
    fit_config = FitConfig.from_mapping(config.get("fit"), prior_weight=args.prior_weight,
                                        max_iterations=args.max_iterations, init=args.init)
    result = fit_volume(images, fit_config, workers=args.threads)
    storage.write_volume(args.out, result.props)
    summary = result.summary()
    sidecar = Path(args.out).with_suffix(".json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({"summary": summary, "config": fit_config.to_dict(),
                   "inputs": [params.to_dict() for _, params in images]}, f, indent=2, sort_keys=True)
    print(f"fit voxels={summary['voxels']} convergence_rate={summary['convergence_rate']:.4f} "
          f"median_residual={summary['median_residual']:.6g}")
    if args.strict and summary["non_converged"]:
        raise RuntimeError(f"{summary['non_converged']} voxeles no convergieron (--strict).")
    return EXIT_OK


def cmd_fuse(args, config: dict) -> int:
    experts = [storage.read_gaussian(path) for path in args.experts]
    keep = None
    if args.keep is not None:
        if len(args.keep) != len(experts) or set(args.keep) - {"0", "1"}:
            raise ValueError("--keep debe ser una cadena de 0/1 con un dígito por experto.")
        keep = [c == "1" for c in args.keep]
    if keep is not None or args.drop_prob is not None:
        experts = fusion.drop_modalities(experts, keep_mask=keep, drop_prob=args.drop_prob, seed=args.seed)
    prior_expert = args.prior_expert or bool(config.get("fusion", {}).get("prior_expert", False))
    fused = fusion.poe_fuse(experts, prior_expert=prior_expert)
    storage.write_gaussian(args.out, fused)
    print(f"fuse experts={len(experts)} mean={np.array2string(fused.mean, precision=6)} "
          f"variance={np.array2string(fused.variance, precision=6)} kl={fusion.gaussian_kl_standard(fused):.6g}")
    return EXIT_OK


def cmd_scale(args, config: dict) -> int:
    volume = storage.read_volume(args.input)
    if args.inverse:
        if not args.record:
            raise ValueError("--inverse requiere --record con el JSON de escala.")
        with open(args.record, "r", encoding="utf-8") as f:
            record = ScaleRecord.from_dict(json.load(f))
        storage.write_volume(args.out, unscale(volume, record))
        print(f"unscale p={record.p:.6g}")
        return EXIT_OK
    percentile = args.percentile or float(config.get("preprocessing", {}).get("percentile", 0.995))
    scaled, record = scale_to_unit(volume, percentile)
    storage.write_volume(args.out, scaled)
    record_path = Path(args.record) if args.record else Path(args.out).with_suffix(".scale.json")
    with open(record_path, "w", encoding="utf-8") as f:
        json.dump(record.to_dict(), f, indent=2, sort_keys=True)
    print(f"scale percentile={record.percentile} p={record.p:.6g} record={record_path}")
    return EXIT_OK


def _train_config(args, config: dict) -> diffusion.TrainConfig:
    hidden = tuple(int(h) for h in args.hidden.split(",")) if getattr(args, "hidden", None) else None
    return diffusion.TrainConfig.from_mapping(
        config.get("diffusion"), epochs=getattr(args, "epochs", None), lr=getattr(args, "lr", None),
        seed=getattr(args, "seed", None), batch_size=getattr(args, "batch_size", None),
        ema_decay=getattr(args, "ema_decay", None),
        timesteps=args.timesteps, beta_start=args.beta_start, beta_end=args.beta_end, hidden=hidden)


def cmd_diffuse_data(args, config: dict) -> int:
    if args.from_gauss:
        data = diffusion.latents_from_factor(storage.read_gaussian(args.from_gauss), args.n, args.seed)
    else:
        data = diffusion.make_mixture_dataset(args.kind, args.n, args.seed)
    storage.write_latents(args.out, data)
    print(f"diffuse data count={data.shape[0]} dim={data.shape[1]}")
    return EXIT_OK


def cmd_diffuse_train(args, config: dict) -> int:
    train_config = _train_config(args, config)
    data = storage.read_latents(args.data)
    model, trace = diffusion.train_toy(data, train_config.schedule(), train_config)
    storage.write_mlp(args.out, model.mlp, train_config.schedule_record())
    if args.loss_out:
        trace.to_csv(args.loss_out, index=False)
    print(f"diffuse train epochs={len(trace)} first_loss={trace['loss'].iloc[0]:.6g} "
          f"last_loss={trace['loss'].iloc[-1]:.6g}")
    return EXIT_OK


def cmd_diffuse_sample(args, config: dict) -> int:
    recorded = storage.read_mlp_schedule(args.model)
    if recorded is not None:
        flags = {"timesteps": args.timesteps, "beta_start": args.beta_start, "beta_end": args.beta_end}
        for key, value in flags.items():
            if value is not None and value != recorded[key]:
                raise ValueError(f"--{key.replace('_', '-')}={value} no coincide con el calendario del modelo "
                                 f"({key}={recorded[key]}).")
        schedule = diffusion.make_schedule(recorded["timesteps"], recorded["beta_start"], recorded["beta_end"])
    else:
        logger.warning("%s no registra calendario; se usan las opciones y [diffusion].", args.model)
        schedule = _train_config(args, config).schedule()
    mlp = storage.read_mlp(args.model)
    latent_dim = mlp.widths[-1]
    denoiser = diffusion.DenoiserModel(mlp, latent_dim, mlp.widths[0] - latent_dim)
    samples = diffusion.ddpm_sample(denoiser, schedule, latent_dim, args.n, args.seed)
    storage.write_latents(args.out, samples)
    print(f"diffuse sample n={samples.shape[0]} mean={np.array2string(samples.mean(axis=0), precision=4)}")
    return EXIT_OK


def _ms_ssim_for_cli(a, b, ms_config: metrics.MsSsimConfig) -> float:
    nx, ny = a.dims[0], a.dims[1]
    scales = min(ms_config.scales, metrics.max_scales((ny, nx), ms_config.window_size))
    if scales < 1:
        raise ValueError(f"Imagen demasiado pequeña para MS-SSIM: tamaño mínimo {ms_config.window_size}.")
    if scales < ms_config.scales:
        logger.warning("MS-SSIM: %dx%d admite solo %d escalas (se pidieron %d); pesos renormalizados.",
                       nx, ny, scales, ms_config.scales)
        ms_config = metrics.MsSsimConfig(scales=scales, window_size=ms_config.window_size, sigma=ms_config.sigma,
                                         k1=ms_config.k1, k2=ms_config.k2, data_range=ms_config.data_range,
                                         weights=ms_config.weights)
    scores = [metrics.ms_ssim(a.data[c], b.data[c], ms_config) for c in range(a.channels)]
    return float(np.mean(scores))


def cmd_metrics(args, config: dict) -> int:
    a = storage.read_volume(args.a)
    b = storage.read_volume(args.b)
    ms_config = metrics.MsSsimConfig.from_mapping(config.get("metrics", {}).get("ms_ssim"),
                                                  scales=args.scales, data_range=args.data_range)
    values = {
        "MSE": metrics.mse(a, b),
        "MAE": metrics.mae(a, b),
        "PSNR": metrics.psnr(a, b, peak=args.peak),
        "MS-SSIM": _ms_ssim_for_cli(a, b, ms_config),
    }
    if args.out:
        pd.DataFrame({"metric": list(values), "value": list(values.values())}).to_csv(args.out, index=False)
    print(" ".join(f"{name}={'inf' if math.isinf(v) else format(v, '.6g')}" for name, v in values.items()))
    return EXIT_OK


def cmd_validate(args, config: dict) -> int:
    props = storage.read_property_map(args.props)
    reference = load_reference_medians(args.reference)
    section = dict(config.get("metrics", {}).get("validation", {}))
    for key in ("mask_pd_min", "clip_percentile", "bins"):
        if getattr(args, key) is not None:
            section[key] = getattr(args, key)
    validation_config = metrics.ValidationConfig.from_mapping(section)
    regions = None
    if args.regions_spec:
        regions = region_masks(PhantomSpec.from_json(args.regions_spec, props.dims))
    elif args.regions_preset:
        regions = region_masks(brain2d_spec(props.dims, config.get("phantom", {}).get("brain2d")))
    report = metrics.validate_properties(props, reference, validation_config, regions)
    written = report.write(args.out)
    print(report.summary.to_string(index=False))
    logger.info("Reporte de validación: %s", ", ".join(str(p) for p in written))
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================
def _diffusion_schedule_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--timesteps", type=int, help="T (por defecto [diffusion] timesteps)")
    parser.add_argument("--beta-start", type=float)
    parser.add_argument("--beta-end", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrisynth", description="Síntesis de contrastes y mapas cuantitativos de RM.")
    parser.add_argument("--config", help="archivo TOML alternativo")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="crea un mapa de propiedades sintético")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=["brain2d"])
    source.add_argument("--spec", help="JSON con la lista de figuras")
    p.add_argument("--dims", default="224x160", help="NXxNY o NXxNYxNZ")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("synth", help="sintetiza un contraste")
    p.add_argument("--props", required=True)
    p.add_argument("--seq", required=True, choices=["mprage", "se", "flair"])
    p.add_argument("--te", type=float, required=True, help="segundos")
    p.add_argument("--tr", type=float, required=True, help="segundos")
    p.add_argument("--ti", type=float, help="segundos (solo mprage y flair)")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--magnitude", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("fit", help="ajusta PD, T1 y T2 por voxel")
    p.add_argument("--inputs", nargs="+", metavar="FILE:SEQ,TE,TR[,TI]")
    p.add_argument("--meta", help="JSON [{path, seq, te, tr, ti}]")
    p.add_argument("--lambda", dest="prior_weight", type=float, help="peso del prior λ")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--init", choices=["prior", "grid"])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="sale con 3 si algún voxel no converge")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("fuse", help="producto de expertos gaussianos")
    p.add_argument("experts", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--prior-expert", action="store_true")
    p.add_argument("--keep", help="máscara 0/1 por experto, p. ej. 101")
    p.add_argument("--drop-prob", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("scale", help="escala por percentil a [-1, 1]")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float)
    p.add_argument("--inverse", action="store_true")
    p.add_argument("--record", help="JSON de escala (salida, o entrada con --inverse)")
    p.set_defaults(handler=cmd_scale)

    p = sub.add_parser("diffuse", help="difusión de juguete sobre latentes")
    dsub = p.add_subparsers(dest="diffuse_command", required=True)

    d = dsub.add_parser("data", help="genera un conjunto de latentes")
    d.add_argument("--kind", choices=list(diffusion.MIXTURE_KINDS), default="mix2d")
    d.add_argument("--from-gauss")
    d.add_argument("--n", type=int, default=2000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(handler=cmd_diffuse_data)

    d = dsub.add_parser("train", help="entrena el modelo de eliminación de ruido")
    d.add_argument("--data", required=True)
    d.add_argument("--epochs", type=int)
    d.add_argument("--lr", type=float)
    d.add_argument("--ema-decay", type=float, help="promedio móvil de pesos (0 lo desactiva)")
    d.add_argument("--batch-size", type=int)
    d.add_argument("--hidden", help="anchos ocultos, p. ej. 64,64")
    d.add_argument("--seed", type=int)
    d.add_argument("--loss-out", help="CSV epoch,loss")
    d.add_argument("--out", required=True)
    _diffusion_schedule_flags(d)
    d.set_defaults(handler=cmd_diffuse_train)

    d = dsub.add_parser("sample", help="muestreo ancestral")
    d.add_argument("--model", required=True)
    d.add_argument("--n", type=int, default=1000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    _diffusion_schedule_flags(d)
    d.set_defaults(handler=cmd_diffuse_sample)

    p = sub.add_parser("metrics", help="MSE, MAE, PSNR y MS-SSIM")
    p.add_argument("--a", required=True, help="referencia")
    p.add_argument("--b", required=True)
    p.add_argument("--peak", type=float)
    p.add_argument("--scales", type=int)
    p.add_argument("--data-range", type=float)
    p.add_argument("--out", help="CSV metric,value")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("validate", help="medianas de T1/T2 contra referencia")
    p.add_argument("--props", required=True)
    p.add_argument("--reference", help="JSON de medianas (por defecto config/reference_medians.json)")
    regions = p.add_mutually_exclusive_group()
    regions.add_argument("--regions-preset", choices=["brain2d"])
    regions.add_argument("--regions-spec")
    p.add_argument("--mask-pd-min", type=float)
    p.add_argument("--clip-percentile", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_validate)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Ejecuta la CLI y regresa el código de salida (no llama a sys.exit).
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        config = setup_app_config(args.config)
        apply_logging_settings(config.get("logging", {}))
        logger.info("Comando %s", args.command)
        return args.handler(args, config)
    except (ValueError, OSError, KeyError) as e:
        logger.error("Error de validación: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as e:
        logger.error("Error de ejecución: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
