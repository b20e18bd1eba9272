"""Acceptance criteria, one test per criterion.

Each test prints a single ``[acceptance] ...: PASS/FAIL`` line (bypassing
pytest capture) and enforces its stated runtime budget.  Everything runs on
the fixture backend: no GPU, no network, no model downloads.

Run with  pytest tests/test_acceptance.py
"""
import hashlib
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner
from torch import nn

from agediff import adapt, invert, p2pedit, promptkit
from agediff.adapt import LoraLinear, LoraPair, base_weights_fingerprint, finetune, init_adapters, ntxent
from agediff.cli import main as cli_main
from agediff.core import (
    AgeLabeledManifest,
    IdentityProfile,
    ManifestEntry,
    Reference,
    save_config,
)
from agediff.core import AGE_GROUPS
from agediff.evalkit import DEFAULT_TARGET_AGES, EvalRecord, age_metric, id_metric, run_benchmark
from agediff.fixtures import (
    MeanIntensityAgeEstimator,
    TinyBackend,
    ToyFaceEmbedder,
    fixture_config,
    materialize_workspace,
    synthetic_face,
)
from agediff.fixtures.tokenizer import ToyTokenizer
from agediff.imageio import save_image, to_float_batch
from agediff.regset import refine_regularization_set
from agediff.runmeta import hash_tree

GOLDEN = Path(__file__).parent / "golden" / "prompt_grammar.txt"


@pytest.fixture
def announce(capsys):
    @contextmanager
    def run(cid: str, name: str, budget_s: float):
        start = time.perf_counter()
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"\n[acceptance] {cid} {name}: FAIL")
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed < budget_s
        with capsys.disabled():
            verdict = "PASS" if ok else "FAIL (over runtime budget)"
            print(f"\n[acceptance] {cid} {name}: {verdict} ({elapsed:.2f}s, budget {budget_s:.0f}s)")
        if not ok:
            raise AssertionError(f"{cid} exceeded runtime budget: {elapsed:.2f}s >= {budget_s}s")

    return run


# --- independent oracles, deliberately spelled out rather than imported -----

def oracle_noun(age, gender, extreme=True):
    if extreme:
        if age < 5:
            return "baby"
        if 5 <= age < 15:
            return "boy" if gender == "male" else "girl"
        if 15 <= age < 65:
            return "man" if gender == "male" else "woman"
        return "elderly"
    if age < 15:
        return "boy" if gender == "male" else "girl"
    return "man" if gender == "male" else "woman"


def oracle_phrase(age, hyphen=True):
    return f"{age}-year-old" if hyphen else f"{age} year old"


def test_c1_prompt_grammar_exactness(announce):
    with announce("C1", "prompt grammar exactness vs golden files", 1.0):
        blocks = []
        current = None
        for line in GOLDEN.read_text(encoding="utf-8").splitlines():
            if line.startswith("age="):
                current = {"key": line}
                blocks.append(current)
            else:
                kind, _, prompt = line.partition("|")
                current[kind] = prompt
        assert len(blocks) == 192  # 12 ages x 2 genders x 8 flag combos
        for block in blocks:
            parts = dict(item.split("=") for item in block["key"].split())
            age = int(parts["age"])
            gender = parts["gender"]
            hyph = parts["hyphen"] == "1"
            refage = parts["refage"] == "1"
            extreme = parts["extreme"] == "1"
            profile = IdentityProfile("sks", gender, (Reference("r", 30),))
            bundle = promptkit.build_bundle(
                profile, alpha_in=age, alpha_tar=age, ref_age=age, reg_age=age,
                use_hyphenated_age=hyph, use_ref_age=refage, use_extreme_nouns=extreme,
            )
            assert bundle.p_ref == block["ref"], block["key"]
            assert bundle.p_reg == block["reg"], block["key"]
            assert bundle.p_in == block["in"], block["key"]
            assert bundle.p_tar == block["tar"], block["key"]


def test_c2_span_mapping_vs_tokenizer_oracle(announce):
    with announce("C2", "span mapping vs tokenizer oracle (200 cases)", 5.0):
        tokenizer = ToyTokenizer()
        rng = np.random.default_rng(20240501)
        for _ in range(200):
            age_in = int(rng.integers(0, 101))
            age_tar = int(rng.integers(0, 101))
            gender = "male" if rng.integers(2) == 0 else "female"
            profile = IdentityProfile("sks", gender, (Reference("r", 30),))
            bundle = promptkit.build_bundle(profile, age_in, age_tar, 30, 30)
            spans_in, spans_tar = promptkit.replacement_spans(bundle, tokenizer)
            for prompt, spans, age in ((bundle.p_in, spans_in, age_in),
                                       (bundle.p_tar, spans_tar, age_tar)):
                noun = oracle_noun(age, gender)
                phrase = oracle_phrase(age)
                # brute-force character ranges from the template itself
                noun_start = len(f"photo of sks ")
                noun_range = set(range(noun_start, noun_start + len(noun)))
                phrase_start = len(f"photo of sks {noun} as ")
                phrase_range = set(range(phrase_start, phrase_start + len(phrase)))
                offsets = tokenizer.offsets(prompt)
                expected = {
                    i for i, (s, e) in enumerate(offsets)
                    if set(range(s, e)) & (noun_range | phrase_range)
                }
                assert set(spans) == expected, prompt
                # exact coverage: selected token spans tile the target chars
                covered = set()
                for i in spans:
                    s, e = offsets[i]
                    chars = set(range(s, e))
                    assert chars <= (noun_range | phrase_range)
                    covered |= chars
                assert covered == {
                    c for c in (noun_range | phrase_range) if not prompt[c].isspace()
                }
                # the age span realizes digits plus "-", "year", "-", "old"
                pieces = [prompt[offsets[i][0]:offsets[i][1]] for i in spans
                          if offsets[i][0] >= phrase_start]
                assert pieces == list(str(age)) + ["-", "year", "-", "old"]


def test_c3_lora_identity_and_merge_equivalence(announce):
    with announce("C3", "LoRA identity and merge equivalence", 30.0):
        backend = TinyBackend(seed=0)
        z = backend.encode_image(synthetic_face(3))
        text = backend.text_embed("photo of sks man as 35-year-old")
        with torch.no_grad():
            base = backend.predict_noise(z, 500, text)
        adapters = init_adapters(backend, rank=16, seed=1)
        backend.attach(adapters)
        try:
            with torch.no_grad():
                attached = backend.predict_noise(z, 500, text)
        finally:
            backend.detach()
        scale = float(base.abs().max())
        assert float((base - attached).abs().max()) / scale < 1e-6

        # adapter path vs materialized W + A @ B over 100 random seeds
        for seed in range(100):
            gen = torch.Generator().manual_seed(seed)
            layer = nn.Linear(8, 8, bias=False)
            with torch.no_grad():
                layer.weight.copy_(torch.randn(8, 8, generator=gen))
            pair = LoraPair(torch.randn(8, 2, generator=gen), torch.randn(2, 8, generator=gen))
            x = torch.randn(4, 8, generator=gen)
            wrapped = LoraLinear(layer, pair, scale=1.0)
            with torch.no_grad():
                adapter_path = wrapped(x)
                layer.weight += pair.A @ pair.B
                wrapped.merged = True
                merged_path = wrapped(x)
            assert float((adapter_path - merged_path).abs().max()) < 1e-5

        # the same equivalence through the backend's merge operation
        backend2 = TinyBackend(seed=5)
        adapters2 = init_adapters(backend2, rank=16, seed=2)
        backend2.attach(adapters2)
        with torch.no_grad():
            for module in backend2.attached_lora_modules().values():
                module.lora_B.normal_(0, 0.05)
            before = backend2.predict_noise(z, 500, text)
            adapt.merge(adapters2, backend2)
            after = backend2.predict_noise(z, 500, text)
        backend2.detach()
        assert float((before - after).abs().max()) < 1e-5


def _training_fixtures():
    images = {}

    def loader(path):
        return images[path]

    refs = []
    for i, age in enumerate((25, 40, 55)):
        images[f"ref{i}"] = synthetic_face(300 + i)
        refs.append(Reference(f"ref{i}", age))
    profile = IdentityProfile("sks", "male", tuple(refs))
    entries = []
    for i in range(6):
        images[f"reg{i}"] = synthetic_face(500 + i)
        entries.append(ManifestEntry(f"reg{i}", 15 + 12 * i, AGE_GROUPS[i]))
    return profile, AgeLabeledManifest(tuple(entries)), loader


def test_c4_frozen_base_guarantee(announce):
    with announce("C4", "frozen-base guarantee under LoRA", 60.0):
        profile, regset, loader = _training_fixtures()

        backend = TinyBackend(seed=0)
        before = base_weights_fingerprint(backend)
        result = finetune(profile, regset, fixture_config(), backend, ToyFaceEmbedder(),
                          seed=0, image_loader=loader)
        assert len(result.log) == 10
        assert all(math.isfinite(entry["loss"]) for entry in result.log)
        assert base_weights_fingerprint(backend) == before

        backend = TinyBackend(seed=0)
        before = base_weights_fingerprint(backend)
        finetune(profile, regset, fixture_config(use_lora=False), backend, ToyFaceEmbedder(),
                 seed=0, image_loader=loader)
        assert base_weights_fingerprint(backend) != before


def test_c5_ntxent_correctness(announce):
    with announce("C5", "NT-Xent value and gradient", 5.0):
        z = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        value = float(ntxent(z, [(0, 1)], temperature=1.0))
        assert abs(value - (-math.log(math.e / (math.e + 1.0)))) < 1e-6

        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            raw = torch.nn.functional.normalize(
                torch.randn(8, 6, generator=gen, dtype=torch.float64), dim=1
            ).requires_grad_(True)
            pairs = [(0, 1), (2, 3), (4, 5)]
            ntxent(raw, pairs, 0.5).backward()
            grad = raw.grad
            eps = 1e-6
            fd = torch.zeros_like(grad)
            for i in range(raw.shape[0]):
                for j in range(raw.shape[1]):
                    plus = raw.detach().clone()
                    minus = raw.detach().clone()
                    plus[i, j] += eps
                    minus[i, j] -= eps
                    fd[i, j] = (
                        float(ntxent(plus, pairs, 0.5)) - float(ntxent(minus, pairs, 0.5))
                    ) / (2 * eps)
            assert float((fd - grad).norm() / fd.norm()) < 1e-4


def test_c6_inversion_round_trip(announce, backend):
    with announce("C6", "inversion round trip and null-text improvement", 60.0):
        prompt = "photo of sks man as 35-year-old"
        traj = invert.ddim_invert(synthetic_face(5), prompt, backend, steps=3)
        plain = invert.default_null_result(traj, prompt, backend, guidance=1.0)
        final = invert.sample_with_nulls(backend, plain.z_T, prompt, plain.null_embeddings, 1.0)
        assert float(((final - plain.source_latent) ** 2).mean()) < 1e-3

        wins, cases = 0, 10
        for seed in range(cases):
            img = synthetic_face(seed)
            target = to_float_batch(img)
            traj = invert.ddim_invert(img, prompt, backend, steps=3)
            base = invert.default_null_result(traj, prompt, backend, guidance=7.5)
            opt = invert.optimize_null_text(traj, prompt, backend, inner_steps=10, guidance=7.5)
            mae_base = float((invert.reconstruct(base, backend) - target).abs().mean())
            mae_opt = float((invert.reconstruct(opt, backend) - target).abs().mean())
            if mae_opt < mae_base:
                wins += 1
        assert wins >= 0.9 * cases


def test_c7_edit_identities(announce, backend, profile):
    with announce("C7", "edit identities and span-config liveness", 60.0):
        img = synthetic_face(7)

        def build(alpha_in, alpha_tar, hyph=True):
            bundle = promptkit.build_bundle(
                profile, alpha_in, alpha_tar, 30, 30, use_hyphenated_age=hyph
            )
            return promptkit.resolve_bundle(bundle, backend.tokenizer)

        def invdata(bundle):
            traj = invert.ddim_invert(img, bundle.p_in, backend, steps=3)
            return invert.optimize_null_text(traj, bundle.p_in, backend,
                                             inner_steps=5, guidance=7.5)

        # identical prompts + full replacement == reconstruction, bitwise
        bundle = build(35, 35)
        inv = invdata(bundle)
        recon = invert.reconstruct(inv, backend)
        ctrl = p2pedit.AttentionController(
            bundle.replace_spans_in, bundle.replace_spans_tar, bundle.alignment,
            total_steps=inv.steps, cross_replace_fraction=1.0, self_replace_fraction=1.0,
        )
        edited, _ = p2pedit.edit(inv, bundle, ctrl, backend)
        assert torch.equal(edited, recon)

        # controller fractions 0 == plain sampling with the target prompt
        bundle = build(35, 80)
        inv = invdata(bundle)
        ctrl = p2pedit.AttentionController(
            bundle.replace_spans_in, bundle.replace_spans_tar, bundle.alignment,
            total_steps=inv.steps, cross_replace_fraction=0.0, self_replace_fraction=0.0,
        )
        edited, _ = p2pedit.edit(inv, bundle, ctrl, backend)
        plain = invert.sample_with_nulls(
            backend, inv.z_T, bundle.p_tar, inv.null_embeddings, inv.guidance
        )
        assert torch.equal(edited, backend.decode_latent(plain))

        # hyphenated vs single-age-token spans give different outputs
        hashes = []
        for hyph in (True, False):
            bundle = build(35, 80, hyph=hyph)
            inv = invdata(bundle)
            ctrl = p2pedit.AttentionController(
                bundle.replace_spans_in, bundle.replace_spans_tar, bundle.alignment,
                total_steps=inv.steps, cross_replace_fraction=0.8, self_replace_fraction=0.4,
            )
            edited, _ = p2pedit.edit(inv, bundle, ctrl, backend)
            hashes.append(hashlib.sha256(edited.numpy().tobytes()).hexdigest())
        assert hashes[0] != hashes[1]


def test_c8_metric_arithmetic_and_report_layout(announce, tmp_path):
    with announce("C8", "metric arithmetic and benchmark table layout", 10.0):
        rec = lambda t, e, i: EvalRecord(f"i{i}", f"o{i}", t, e, 0.0)
        result = age_metric([rec(25, 30, 0), rec(45, 40, 1)])
        assert result.per_target == {25: 5.0, 45: 5.0} and result.overall == 5.0
        assert age_metric([rec(t, t, i) for i, t in enumerate((1, 80))]).overall == 0.0
        assert age_metric([rec(80, 73, 0)]).overall == 7.0

        class TableEmbedder:
            def __init__(self):
                self.table = {
                    0: torch.tensor([1.0, 0.0]),
                    1: torch.tensor([1.0, 0.0]),
                    2: torch.tensor([0.0, 1.0]),
                    3: torch.tensor([0.8, 0.6]),
                }

            def embed(self, image):
                return self.table[int(np.asarray(image).ravel()[0])]

        mk = lambda k: np.full((2, 2, 3), k, dtype=np.uint8)
        emb = TableEmbedder()
        assert id_metric([(mk(0), mk(1))], emb).value == pytest.approx(0.0, abs=1e-6)
        assert id_metric([(mk(0), mk(2))], emb).value == pytest.approx(1.0, abs=1e-6)
        assert id_metric([(mk(0), mk(1)), (mk(0), mk(3))], emb).value == pytest.approx(0.1, abs=1e-6)

        inp = tmp_path / "input.png"
        save_image(synthetic_face(9), inp)
        prof = IdentityProfile("sks", "male", (Reference("r", 30),))

        report = run_benchmark(
            [prof], {"sks": [str(inp)]},
            lambda p, path, t, s: synthetic_face(1000 + t),
            MeanIntensityAgeEstimator(), ToyFaceEmbedder(), tmp_path / "bench",
        )
        header = (tmp_path / "bench" / "report.tsv").read_text().splitlines()[0]
        assert header == "metric\t" + "\t".join(str(t) for t in DEFAULT_TARGET_AGES) + "\tALL"
        assert DEFAULT_TARGET_AGES == (1, 5, 8, 12, 17, 25, 35, 45, 60, 80)


def test_c9_regset_refinement(announce):
    with announce("C9", "regularization set refinement 612 -> 594", 5.0):
        entries = []
        for g_i, group in enumerate(AGE_GROUPS):
            for i in range(102):
                entries.append(ManifestEntry(f"{group}/{i:04d}.png", 50, group))
        manifest = AgeLabeledManifest(tuple(entries))
        assert len(manifest) == 612
        skip = [e.image_ref for e in manifest.entries[::34]][:18]
        assert len(skip) == 18

        def loader(path):
            level = (hash(path) % 200) + 20
            return np.full((8, 8, 3), level, dtype=np.uint8)

        result = refine_regularization_set(
            manifest, MeanIntensityAgeEstimator(), skip_list=skip, image_loader=loader
        )
        assert len(result.manifest) == 594
        assert all(0 <= e.age <= 100 for e in result.manifest)
        assert set(result.manifest.image_refs()) <= set(manifest.image_refs())
        assert len(result.skipped) == 18


def test_c10_end_to_end_determinism(announce, tmp_path):
    with announce("C10", "end-to-end CLI determinism", 180.0):
        import shutil

        runner = CliRunner()
        ws = materialize_workspace(tmp_path, seed=0)
        config_path = tmp_path / "config.txt"
        save_config(fixture_config(null_inner_steps=2), config_path)
        adapters = tmp_path / "adapters"
        edited = tmp_path / "out" / "edited.png"
        records = tmp_path / "records.jsonl"
        eval_dir = tmp_path / "eval"

        def run_pipeline() -> dict:
            result = runner.invoke(cli_main, [
                "finetune",
                "--profile", str(ws["profile"]),
                "--regset", str(ws["manifest"]),
                "--config", str(config_path),
                "--seed", "0",
                "--out", str(adapters),
            ])
            assert result.exit_code == 0, result.output

            result = runner.invoke(cli_main, [
                "edit",
                "--profile", str(ws["profile"]),
                "--adapters", str(adapters),
                "--image", str(ws["input"]),
                "--target-age", "80",
                "--age-in", "35",
                "--seed", "0",
                "--config", str(config_path),
                "--out", str(edited),
            ])
            assert result.exit_code == 0, result.output

            records.write_text(json.dumps({
                "input": str(ws["input"]), "output": str(edited), "target_age": 80,
            }) + "\n")
            result = runner.invoke(cli_main, [
                "evaluate",
                "--records", str(records),
                "--target-ages", "80",
                "--out", str(eval_dir),
            ])
            assert result.exit_code == 0, result.output

            return {
                "adapters": hash_tree(adapters),
                "edit": hash_tree(edited.parent),
                "eval": hash_tree(eval_dir),
            }

        first = run_pipeline()
        for produced in (adapters, edited.parent, eval_dir):
            shutil.rmtree(produced)
        second = run_pipeline()
        assert first == second
        assert first["adapters"] and first["edit"] and first["eval"]
