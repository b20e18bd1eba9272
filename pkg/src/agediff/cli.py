"""Thin command-line client for the editing service.

Every subcommand is a small HTTP call.  By default the service runs
embedded in-process (no sockets); pass ``--server http://host:port`` to
talk to a running instance, or use ``agediff serve`` to start one.
"""
from __future__ import annotations

import json
import sys

import click
import httpx


class ServiceClient:
    """POST/GET against either a remote server or an in-process app."""

    def __init__(self, server: str | None = None):
        if server:
            self._client = httpx.Client(base_url=server, timeout=600.0)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def call(self, method: str, path: str, payload: dict | None = None) -> dict:
        response = self._client.request(method, path, json=payload)
        try:
            body = response.json()
        except ValueError:
            body = {"error": response.text}
        if response.status_code >= 400:
            message = body.get("error") or body.get("detail") or response.text
            stage = body.get("stage")
            prefix = f"[{stage}] " if stage else ""
            raise click.ClickException(f"{prefix}{message}")
        return body


def _emit(data: dict) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _progress(message: str) -> None:
    # human-readable progress goes to stderr; stdout stays machine-readable
    click.echo(f"[agediff] {message}", err=True)


def _config_payload(config: str | None, set_options: tuple[str, ...]) -> dict:
    overrides = {}
    for item in set_options:
        if "=" not in item:
            raise click.ClickException(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = _coerce(value.strip())
    return {"config_path": config, "overrides": overrides}


def _coerce(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


@click.group()
@click.option("--server", default=None, envvar="AGEDIFF_SERVER",
              help="Service URL; omit to run the service in-process.")
@click.pass_context
def main(ctx, server):
    """Personalized facial age editing pipeline."""
    ctx.obj = ServiceClient(server)


@main.command("prepare-regset")
@click.option("--in", "manifest", required=True, type=click.Path(exists=True),
              help="Group-labeled input manifest (TSV).")
@click.option("--skip", "skip_list", default=None, type=click.Path(exists=True),
              help="Skip-list file: one image path per line.")
@click.option("--estimator", default="mean-intensity", show_default=True)
@click.option("--workers", default=1, show_default=True, type=int,
              help="Thread-pool size for estimation.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def prepare_regset(client: ServiceClient, manifest, skip_list, estimator, workers, out_path):
    """Relabel a group-labeled manifest with integer estimated ages."""
    _progress(f"relabeling {manifest} with estimator {estimator}")
    _emit(client.call("POST", "/regset/refine", {
        "manifest_path": str(manifest),
        "skip_list_path": str(skip_list) if skip_list else None,
        "estimator": estimator,
        "workers": workers,
        "out_path": str(out_path),
    }))


@main.command("sample-regset")
@click.option("--in", "manifest", required=True, type=click.Path(exists=True))
@click.option("--per-group", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
def sample_regset(client: ServiceClient, manifest, per_group, seed, out_path):
    """Draw a balanced per-group sample from a manifest."""
    _progress(f"sampling {per_group} per group from {manifest} (seed {seed})")
    _emit(client.call("POST", "/regset/sample", {
        "manifest_path": str(manifest),
        "per_group": per_group,
        "seed": seed,
        "out_path": str(out_path),
    }))


@main.command("prompts")
@click.option("--token", default="sks", show_default=True)
@click.option("--gender", required=True, type=click.Choice(["male", "female"]))
@click.option("--age-in", required=True, type=int)
@click.option("--age-tar", required=True, type=int)
@click.option("--ref-age", default=None, type=int)
@click.option("--reg-age", default=None, type=int)
@click.option("--no-hyphens", is_flag=True, help="Use '<age> year old' instead of '<age>-year-old'.")
@click.option("--no-ref-age", is_flag=True, help="Drop the age phrase from the reference prompt.")
@click.option("--no-extreme-nouns", is_flag=True, help="Never substitute baby/elderly.")
@click.pass_obj
def prompts(client: ServiceClient, token, gender, age_in, age_tar, ref_age, reg_age,
            no_hyphens, no_ref_age, no_extreme_nouns):
    """Print the four prompts and their replacement spans."""
    _emit(client.call("POST", "/prompts", {
        "token": token,
        "gender": gender,
        "age_in": age_in,
        "age_tar": age_tar,
        "ref_age": ref_age,
        "reg_age": reg_age,
        "use_hyphenated_age": not no_hyphens,
        "use_ref_age": not no_ref_age,
        "use_extreme_nouns": not no_extreme_nouns,
    }))


@main.command("finetune")
@click.option("--profile", required=True, type=click.Path(exists=True))
@click.option("--regset", required=True, type=click.Path(exists=True))
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--set", "set_options", multiple=True, help="Config override key=value.")
@click.option("--backend", default="tiny", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def finetune(client: ServiceClient, profile, regset, config, set_options, backend, seed, out_dir):
    """Fine-tune adapters for one identity profile."""
    _progress(f"fine-tuning on {profile} + {regset} -> {out_dir}")
    _emit(client.call("POST", "/finetune", {
        "profile_path": str(profile),
        "regset_path": str(regset),
        "out_dir": str(out_dir),
        "backend": backend,
        "seed": seed,
        "config": _config_payload(config, set_options),
    }))


@main.command("edit")
@click.option("--profile", required=True, type=click.Path(exists=True))
@click.option("--adapters", "adapters_dir", default=None, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--target-age", required=True, type=int)
@click.option("--age-in", default=None, type=int,
              help="Source age; estimated from the image if omitted.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--backend", default="tiny", show_default=True)
@click.option("--estimator", default="mean-intensity", show_default=True)
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--set", "set_options", multiple=True, help="Config override key=value.")
@click.option("--inversion-cache", default=None, type=click.Path(),
              help="Directory for persisting/reusing the inversion.")
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="Output PNG; defaults to <image>_to_<age>.png.")
@click.pass_obj
def edit(client: ServiceClient, profile, adapters_dir, image, target_age, age_in, seed,
         backend, estimator, config, set_options, inversion_cache, out_path):
    """Edit one face image to a target age."""
    if out_path is None:
        from pathlib import Path

        p = Path(image)
        out_path = p.with_name(f"{p.stem}_to_{target_age}.png")
    _progress(f"editing {image} to age {target_age} (seed {seed})")
    _emit(client.call("POST", "/edit", {
        "profile_path": str(profile),
        "adapters_dir": str(adapters_dir) if adapters_dir else None,
        "image_path": str(image),
        "target_age": target_age,
        "age_in": age_in,
        "seed": seed,
        "backend": backend,
        "estimator": estimator,
        "inversion_cache_dir": str(inversion_cache) if inversion_cache else None,
        "config": _config_payload(config, set_options),
        "out_path": str(out_path),
    }))


@main.command("evaluate")
@click.option("--records", required=True, type=click.Path(exists=True),
              help="JSONL of {input, output, target_age} rows.")
@click.option("--estimator", default="mean-intensity", show_default=True)
@click.option("--embedder", default="toy", show_default=True)
@click.option("--target-ages", default=None,
              help="Comma-separated report columns; defaults to the benchmark grid.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def evaluate(client: ServiceClient, records, estimator, embedder, target_ages, out_dir):
    """Score edited images: AGE accuracy and ID preservation."""
    _progress(f"evaluating {records}")
    ages = [int(x) for x in target_ages.split(",")] if target_ages else None
    _emit(client.call("POST", "/evaluate", {
        "records_path": str(records),
        "estimator": estimator,
        "embedder": embedder,
        "target_ages": ages,
        "out_dir": str(out_dir),
    }))


@main.command("ablate")
@click.option("--flag", required=True)
@click.option("--profile", required=True, type=click.Path(exists=True))
@click.option("--regset", required=True, type=click.Path(exists=True))
@click.option("--inputs", required=True, help="Comma-separated input image paths.")
@click.option("--backend", default="tiny", show_default=True)
@click.option("--estimator", default="mean-intensity", show_default=True)
@click.option("--embedder", default="toy", show_default=True)
@click.option("--target-ages", default=None)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--set", "set_options", multiple=True, help="Config override key=value.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def ablate(client: ServiceClient, flag, profile, regset, inputs, backend, estimator,
           embedder, target_ages, seed, config, set_options, out_dir):
    """Run one pipeline flag on and off, reporting both evaluations."""
    _progress(f"ablating {flag}: two full runs into {out_dir}")
    ages = [int(x) for x in target_ages.split(",")] if target_ages else None
    _emit(client.call("POST", "/ablate", {
        "flag": flag,
        "profile_path": str(profile),
        "regset_path": str(regset),
        "input_paths": [p.strip() for p in inputs.split(",") if p.strip()],
        "backend": backend,
        "estimator": estimator,
        "embedder": embedder,
        "target_ages": ages,
        "seed": seed,
        "config": _config_payload(config, set_options),
        "out_dir": str(out_dir),
    }))


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8787, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
