"""Acceptance criteria 1-9.

Each test prints one PASS/FAIL line and records it for the terminal summary.
Runtime limits include any fixture work the criterion triggers.
"""

import contextlib
import io
import itertools
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from drlm import cli
from drlm import inference as inf
from drlm.autodiff import Tape
from drlm.corpus import Document, build_vocab, encode, generate_synthetic
from drlm.metrics import ConfusionCounts, binomial_test, macro_f1, perplexity
from drlm.model import DRLM, ModelDims, param_shapes
from drlm.training import (
    AdagradState,
    TrainConfig,
    adagrad_step,
    clip_gradients,
    conditional_objective,
    evaluate_accuracy,
    evaluate_perplexity,
    fit,
    global_norm,
    init_params,
    joint_objective,
)

from conftest import ACCEPTANCE, random_model, random_sentences


@contextlib.contextmanager
def criterion(number, title, limit=None):
    """Time the block, enforce the runtime limit and record a PASS/FAIL line."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
        elapsed = time.perf_counter() - start
        if limit is not None:
            assert elapsed < limit, f"took {elapsed:.1f}s, limit {limit}s"
        status = "PASS"
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        status = "FAIL"
        notes.append(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    finally:
        detail = "; ".join(notes)
        line = f"criterion {number} {status} [{elapsed:.1f}s] {title}" + (f": {detail}" if detail else "")
        ACCEPTANCE[number] = line
        print(line)


# -- shared synthetic corpus and models --------------------------------------------

SMALL = 16  # K = H for the tagging runs
LM = 32  # K = H for the language-model comparison
TAG_EPOCHS = 3
LM_EPOCHS = 5


@pytest.fixture(scope="session")
def synthetic():
    synth = generate_synthetic(seed=0, Z=3, vocab_per_relation=100, docs=500, sentences_per_doc=6)
    raw = synth.documents
    vocab = build_vocab(raw[:400])
    splits = [encode(part, vocab, synth.labels).documents for part in (raw[:400], raw[400:450], raw[450:])]
    return vocab, synth.labels, splits


@pytest.fixture(scope="session")
def trained(synthetic):
    """Memoized fit results keyed by (variant, objective, K, epochs, seed)."""
    vocab, _, (train, dev, _) = synthetic
    cache = {}

    def get(variant, objective, K, epochs, seed):
        key = (variant, objective, K, epochs, seed)
        if key not in cache:
            Z = 3 if variant.startswith("drlm") else 1
            model = init_params(ModelDims(len(vocab), K, K, Z), seed=seed, variant=variant)
            cache[key] = fit(model, train, dev, TrainConfig(objective=objective, epochs=epochs, seed=seed)).model
        return cache[key]

    return get


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    with criterion(1, "gradient check, Model I and II, joint and conditional", limit=60) as notes:
        out = io.StringIO()
        argv = ["gradcheck", "--set", "model.V=12", "--set", "model.K=6", "--set", "model.H=6",
                "--set", "model.Z=3", "--set", "gradcheck.T=3"]
        code = cli.main(argv, out=out)
        lines = [dict(p.split("=", 1) for p in line.split()) for line in out.getvalue().strip().splitlines()]
        checks = {line["check"] for line in lines if "check" in line}
        summary = lines[-1]
        notes.append(f"worst {summary['worst_error']} at {summary['worst_check']} {summary['worst_param']}")
        assert code == 0
        assert checks == {"drlm/joint", "drlm/conditional", "drlm-model2/joint", "drlm-model2/conditional"}
        assert max(float(line["max_rel_error"]) for line in lines if "check" in line) < 1e-4
        assert summary["status"] == "pass"


# -- 2 ---------------------------------------------------------------------------------


def per_token_log_probs(model, first, second):
    """log p(w_n | ...) for every token of ``second``, conditioned on ``first``."""
    tape = Tape(record=False)
    enc1, _ = model.encode_sentence(tape, first)
    context = enc1.context if model.uses_context else None
    enc2, _ = model.encode_sentence(tape, second, carry=False)
    logp = model.token_log_probs(tape, enc2.predictors, context, 0).value
    return logp[second, np.arange(len(second))]


def test_criterion_2_degenerate_equivalence():
    with criterion(2, "Z=1 identity-tied DRLM equals DCLM; zero context equals RNNLM", limit=10) as notes:
        rng = np.random.default_rng(2)
        worst_dclm = worst_rnn = 0.0
        for i in range(100):
            V, K, H = int(rng.integers(6, 15)), int(rng.integers(2, 6)), int(rng.integers(2, 7))
            drlm = random_model(V=V, K=K, H=H, Z=1, seed=100 + i)
            drlm.params["V_z.0"] = np.eye(H)
            drlm.params["M_z.0"] = np.eye(H)
            first, second = random_sentences(rng, V, rng.integers(1, 6, size=2))
            dclm = DRLM(drlm.dims, "dclm", {k: drlm.params[k] for k in param_shapes(drlm.dims, "dclm")})
            a = per_token_log_probs(drlm, first, second)
            b = per_token_log_probs(dclm, first, second)
            worst_dclm = max(worst_dclm, float(np.abs(a - b).max()))
            zeroed = drlm.copy()
            zeroed.params["W_c"][:] = 0.0
            rnnlm = DRLM(drlm.dims, "rnnlm", {k: drlm.params[k] for k in param_shapes(drlm.dims, "rnnlm")})
            c = per_token_log_probs(zeroed, first, second)
            d = per_token_log_probs(rnnlm, first, second)
            worst_rnn = max(worst_rnn, float(np.abs(c - d).max()))
        notes.append(f"max |diff| dclm {worst_dclm:.2e}, rnnlm {worst_rnn:.2e}")
        assert worst_dclm <= 1e-10 and worst_rnn <= 1e-10


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_3_inference_identities():
    with criterion(3, "posterior normalization, exhaustive marginal, objective identities", limit=30) as notes:
        rng = np.random.default_rng(3)
        # (a)
        worst = 0.0
        for i in range(1000):
            if i % 100 == 0:
                model = random_model(V=9, K=3, H=4, Z=int(rng.integers(2, 5)), seed=300 + i, scale=1.5)
            tokens = random_sentences(rng, 9, [int(rng.integers(1, 6))])[0]
            c_prev = rng.normal(scale=2.0, size=(4, 1))
            post = inf.relation_posterior(model, tokens, c_prev)
            worst = max(worst, abs(post.probs.sum() - 1.0))
        notes.append(f"(a) {worst:.1e}")
        assert worst <= 1e-9
        # (b)
        worst = 0.0
        for i in range(10):
            model = random_model(Z=2, seed=400 + i, scale=1.0)
            sentences = random_sentences(rng, 7, rng.integers(1, 4, size=3))
            joints = [inf.joint_log_prob(model, sentences, list(z)) for z in itertools.product(range(2), repeat=3)]
            worst = max(worst, abs(inf.marginal_log_likelihood(model, sentences) - logsumexp(joints)))
        notes.append(f"(b) {worst:.1e}")
        assert worst <= 1e-9
        # (c) and (d)
        worst_c = worst_d = 0.0
        for i in range(10):
            for variant in ("drlm", "drlm-model2"):
                model = random_model(Z=3, variant=variant, seed=500 + i, scale=1.0)
                sentences = random_sentences(rng, 7, rng.integers(1, 4, size=3))
                doc = Document(sentences, [int(z) for z in rng.integers(0, 3, size=3)])
                cond = conditional_objective(model, Tape(), doc).item()
                joint = joint_objective(model, Tape(), doc).item()
                if variant == "drlm":
                    posts = inf.slot_posteriors(model, doc)
                    summed = -sum(math.log(p.probs[z]) for p, z in zip(posts, doc.relations))
                    worst_c = max(worst_c, abs(cond - summed))
                worst_d = max(worst_d, abs(joint - (cond - inf.marginal_log_likelihood(model, doc))))
        notes.append(f"(c) {worst_c:.1e} (d) {worst_d:.1e}")
        assert worst_c <= 1e-10 and worst_d <= 1e-10


# -- 4 ---------------------------------------------------------------------------------


def test_criterion_4_smc():
    with criterion(4, "SMC log-marginal and slot posteriors", limit=180) as notes:
        rng = np.random.default_rng(4)
        model = random_model(V=9, K=4, H=4, Z=2, variant="drlm-model2", seed=40, scale=1.0)
        sentences = random_sentences(rng, 9, [3, 2, 3])
        exact, _ = inf.enumerate_exact_model2(model, sentences)
        estimates = [inf.smc_log_marginal(inf.smc_sample(model, sentences, 2000, seed=s)) for s in range(50)]
        gap = abs(float(np.mean(estimates)) - exact)
        notes.append(f"model II gap {gap:.4f} nats")
        assert gap <= 0.05
        model1 = random_model(V=9, K=4, H=4, Z=3, seed=41, scale=1.0)
        sentences = random_sentences(rng, 9, [3, 2, 3, 2])
        ps = inf.smc_sample(model1, sentences, 5000, proposal="prior", seed=0)
        exact_posts = inf.slot_posteriors(model1, sentences)
        err = max(
            float(np.abs(est - post.probs).max())
            for est, post in zip(inf.smc_slot_marginals(ps, 3), exact_posts)
        )
        notes.append(f"model I max entry error {err:.4f}")
        assert err <= 0.02


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_5_synthetic_tagging(synthetic, trained):
    with criterion(5, "synthetic tagging accuracy", limit=300) as notes:
        vocab, labels, (_, _, test) = synthetic
        model = trained("drlm", "conditional", SMALL, TAG_EPOCHS, 0)
        acc = evaluate_accuracy(model, test)
        gold = [z for doc in test for z in doc.relations]
        majority = max(np.bincount(gold)) / len(gold)
        notes.append(f"V={len(vocab)} accuracy {acc:.3f} vs most-common-class {majority:.3f}")
        assert acc >= 0.90


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_6_synthetic_language_modeling(synthetic, trained):
    with criterion(6, "DRLM perplexity at least 2% below RNNLM", limit=600) as notes:
        _, _, (_, _, test) = synthetic
        ppl = {v: evaluate_perplexity(trained(v, "joint", LM, LM_EPOCHS, 0), test) for v in ("drlm", "dclm", "rnnlm")}
        gain = 1.0 - ppl["drlm"] / ppl["rnnlm"]
        notes.append(" ".join(f"{v} {p:.2f}" for v, p in ppl.items()) + f", drlm {100 * gain:.1f}% below rnnlm")
        assert gain >= 0.02


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_7_objective_ordering(synthetic, trained):
    with criterion(7, "conditional accuracy >= joint accuracy over 3 seeds") as notes:
        _, _, (_, _, test) = synthetic
        for seed in range(3):
            cond = evaluate_accuracy(trained("drlm", "conditional", SMALL, TAG_EPOCHS, seed), test)
            joint = evaluate_accuracy(trained("drlm", "joint", SMALL, TAG_EPOCHS, seed), test)
            notes.append(f"seed {seed} {cond:.3f} vs {joint:.3f}")
            assert cond >= joint


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_8_metrics_suite():
    with criterion(8, "metrics unit suite", limit=5) as notes:
        V, tokens = 50, 123
        assert perplexity(tokens * math.log(1.0 / V), tokens) == pytest.approx(V, rel=1e-12)
        # gold 0,0,1,1 all predicted 0: F1 = 2/3 for class 0, 0 for class 1
        assert macro_f1(ConfusionCounts.from_labels([0, 0, 1, 1], [0, 0, 0, 0], 2)) == pytest.approx(1 / 3, abs=1e-12)
        p = binomial_test(60, 40, 100)
        assert abs(p - 0.0284) <= 1e-4
        grads = {"a": np.array([[6.0, 0.0]]), "b": np.array([[8.0]])}
        assert global_norm(clip_gradients(grads, 5.0)) == pytest.approx(5.0, abs=1e-12)
        params = {"w": np.array([[2.0]])}
        adagrad_step(params, {"w": np.array([[-3.0]])}, AdagradState.zeros_like(params), 0.1)
        assert params["w"][0, 0] - 2.0 == pytest.approx(0.1, abs=1e-7)
        notes.append(f"binomial tail {p:.6f}")


# -- 9 ---------------------------------------------------------------------------------


def run_cli(*argv):
    result = subprocess.run([sys.executable, "-m", "drlm", *map(str, argv)], capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    return result.stdout


def test_criterion_9_reproducibility(tmp_path):
    with criterion(9, "reruns give byte-identical checkpoints and predictions") as notes:
        small = ["--set", "synth.train_docs=30", "--set", "synth.dev_docs=8", "--set", "synth.test_docs=8",
                 "--set", "synth.vocab_per_relation=15"]
        run_cli("synth", "--seed", 2, "--set", f"paths.out={tmp_path / 'data'}", *small)
        data = tmp_path / "data"
        common = ["--seed", 4, "--set", "model.K=8", "--set", "model.H=8", "--set", "train.epochs=2",
                  "--set", f"paths.train={data / 'train.jsonl'}", "--set", f"paths.dev={data / 'dev.jsonl'}",
                  "--set", f"paths.test={data / 'test.jsonl'}", "--set", f"paths.labels={data / 'labels.txt'}"]
        compared = 0
        for variant, objective in (("drlm", "conditional"), ("drlm-model2", "joint")):
            outputs = []
            for run in ("a", "b"):
                ckpt = tmp_path / f"{variant}-{run}.ckpt"
                args = [*common, "--variant", variant, "--objective", objective, "--checkpoint", ckpt]
                run_cli("train", *args)
                run_cli("tag", *args)
                outputs.append([ckpt, ckpt.with_name(ckpt.name + ".predictions.tsv"), ckpt.with_name(ckpt.name + ".vocab")])
            for a, b in zip(*outputs):
                assert a.read_bytes() == b.read_bytes(), f"{a.name} differs from {b.name}"
                compared += 1
        notes.append(f"{compared} file pairs identical")
