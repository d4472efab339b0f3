import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import numpy as np
import pytest
import torch

from persrep import errors
from persrep.dataset import ImageRecord, Provenance, SyntheticPool, write_image
from persrep.generation.backgrounds import DirectoryBackgrounds, ProceduralBackgrounds, generate_backgrounds
from persrep.generation.captions import CaptionCorpus, strip_identifier
from persrep.generation.client import ExternalGeneratorClient, encode_png
from persrep.generation.compositing import cut_and_paste
from persrep.generation.diffusion import NoiseSchedule, dreambooth_loss
from persrep.generation.filtering import filter_pool
from persrep.generation.synthesis import GeneratorConfig, register_generator, synthesize_pool, unregister_generator

FIXTURES = Path(__file__).parent / "fixtures"


# -- captions ---------------------------------------------------------------

def test_override_wins():
    corpus = CaptionCorpus.load()
    assert strip_identifier("photo of a <new1> at the beach", "dog", corpus) == "photo of a beach"


def test_rule_drops_identifier_phrase():
    assert strip_identifier("A <new1> mug on a wooden desk", "mug") == "A wooden desk"


def test_bare_token_is_malformed():
    with pytest.raises(errors.MalformedTemplate):
        strip_identifier("<new1>", "mug")


def test_missing_token():
    with pytest.raises(errors.MissingIdentifierToken):
        strip_identifier("a mug on a desk", "mug")


def test_whole_corpus_matches_hand_fixture():
    corpus = CaptionCorpus.load()
    expected = json.loads((FIXTURES / "strip_identifier_expected.json").read_text())
    assert len(expected) == len(corpus.entries)
    for category, template, want in expected:
        assert strip_identifier(template, category, corpus) == want, template


# -- cut and paste ----------------------------------------------------------

def _fg(rng, h=20, w=16):
    px = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    mask = np.zeros((h, w), bool)
    mask[2:h - 2, 3:w - 3] = rng.random((h - 4, w - 6)) < 0.9
    mask[h // 2, w // 2] = True
    return ImageRecord("fg", px, "a", mask=mask)


def test_full_mask_half_scale_area():
    fg = ImageRecord("fg", np.full((10, 10, 3), 200, np.uint8), "a", mask=np.ones((10, 10), bool))
    out = cut_and_paste(fg, np.zeros((32, 32, 3), np.uint8), scale=0.5)
    assert out.mask.sum() == 25


def test_background_preserved_outside_mask():
    rng = np.random.default_rng(0)
    for seed in range(50):
        bg = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
        out = cut_and_paste(_fg(rng), bg, rng_seed=seed)
        assert np.array_equal(out.pixels[~out.mask], bg[~out.mask])


def _resampled_area(mask, s):
    # nearest-neighbour resampling done by hand: output cell (i, j) reads source floor((i + .5) / s_eff)
    r0, c0 = np.flatnonzero(mask.any(1))[0], np.flatnonzero(mask.any(0))[0]
    r1, c1 = np.flatnonzero(mask.any(1))[-1], np.flatnonzero(mask.any(0))[-1]
    crop = mask[r0:r1 + 1, c0:c1 + 1]
    h, w = crop.shape
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    count = 0
    for i in range(nh):
        for j in range(nw):
            count += crop[min(h - 1, int((i + 0.5) * h / nh)), min(w - 1, int((j + 0.5) * w / nw))]
    return count


def test_area_follows_resampling_oracle():
    rng = np.random.default_rng(1)
    fg = ImageRecord("fg", np.zeros((30, 30, 3), np.uint8), "a", mask=np.ones((30, 30), bool))
    for seed in range(40):
        out, params = cut_and_paste(fg, np.zeros((64, 64, 3), np.uint8), rng_seed=seed, return_params=True)
        assert out.mask.sum() == _resampled_area(fg.mask, params.scale)
        ratio = out.mask.sum() / fg.mask.sum()
        assert 0.9 * params.scale ** 2 <= ratio <= 1.1 * params.scale ** 2


def test_foreground_too_large():
    fg = ImageRecord("fg", np.zeros((30, 30, 3), np.uint8), "a", mask=np.ones((30, 30), bool))
    with pytest.raises(errors.ForegroundTooLarge):
        cut_and_paste(fg, np.zeros((16, 16, 3), np.uint8), scale=1.0)


def test_missing_mask():
    with pytest.raises(errors.MissingMasks):
        cut_and_paste(ImageRecord("fg", np.zeros((4, 4, 3), np.uint8), "a"), np.zeros((8, 8, 3), np.uint8))


# -- backgrounds ------------------------------------------------------------

def test_six_hundred_distinct_procedural_backgrounds():
    corpus = CaptionCorpus.load()
    a = generate_backgrounds(corpus, 600, ProceduralBackgrounds(), seed=1)
    b = generate_backgrounds(corpus, 600, ProceduralBackgrounds(), seed=1)
    assert len({bg.pixels.tobytes() for bg in a}) == 600
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


def _folder(tmp_path, n):
    rng = np.random.default_rng(n)
    for k in range(n):
        write_image(tmp_path / f"{k}.png", rng.integers(0, 256, (20, 20, 3), dtype=np.uint8))
    return DirectoryBackgrounds(tmp_path, size=(20, 20))


def test_directory_backgrounds_without_replacement(tmp_path):
    out = generate_backgrounds(CaptionCorpus.load(), 5, _folder(tmp_path, 10), seed=0)
    assert len(out) == 5
    assert len({b.seed for b in out}) == 5


def test_directory_backgrounds_too_few(tmp_path):
    with pytest.raises(errors.InsufficientSourceImages):
        generate_backgrounds(CaptionCorpus.load(), 5, _folder(tmp_path, 3), seed=0)


# -- personalized generator objective ----------------------------------------

def _linear_denoiser(W, U):
    return lambda z, c: z @ W.T + (c @ U.T)


def test_perfect_reconstructor_gives_zero():
    sched = NoiseSchedule.linear(10)
    rng = np.random.default_rng(2)
    x, x_pr = rng.normal(size=4), rng.normal(size=4)
    targets = {}

    def perfect(z, c):
        return targets[int(c[0])]

    targets[0], targets[1] = torch.as_tensor(x), torch.as_tensor(x_pr)
    for lam in (0.0, 1.0, 3.5):
        loss = dreambooth_loss(perfect, x, x_pr, [0.0], [1.0], 3, 7, rng.normal(size=4), rng.normal(size=4),
                               lam, sched)
        assert float(loss) == 0.0


def test_unit_residual_on_two_elements():
    sched = NoiseSchedule((1.0,), (1.0,), (1.0,))
    x = np.zeros(2)
    loss = dreambooth_loss(lambda z, c: torch.ones(2, dtype=torch.float64), x, x, [0.0], [0.0], 0, 0,
                           np.zeros(2), np.zeros(2), 0.0, sched)
    assert float(loss) == 2.0


def test_dreambooth_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    sched = NoiseSchedule.linear(50)
    for _ in range(50):
        d, k = 5, 3
        x, x_pr = rng.normal(size=d), rng.normal(size=d)
        eps, eps_p = rng.normal(size=d), rng.normal(size=d)
        c, c_pr = rng.normal(size=k), rng.normal(size=k)
        t, tp = rng.integers(0, 50, size=2)
        lam = rng.uniform(0, 2)
        W = torch.tensor(rng.normal(size=(d, d)), requires_grad=True)
        U = torch.tensor(rng.normal(size=(d, k)))

        def f(Wm):
            return dreambooth_loss(_linear_denoiser(Wm, U), x, x_pr, c, c_pr, int(t), int(tp), eps, eps_p, lam, sched)

        f(W).backward()
        g = W.grad.numpy()
        h = 1e-6
        fd = np.zeros_like(g)
        base = W.detach().clone()
        for idx in np.ndindex(*g.shape):
            plus, minus = base.clone(), base.clone()
            plus[idx] += h
            minus[idx] -= h
            fd[idx] = (float(f(plus)) - float(f(minus))) / (2 * h)
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4


def test_invalid_timestep():
    sched = NoiseSchedule.linear(5)
    with pytest.raises(errors.InvalidTimestep):
        dreambooth_loss(lambda z, c: z, np.zeros(2), np.zeros(2), [0.0], [0.0], 5, 0,
                        np.zeros(2), np.zeros(2), 1.0, sched)


# -- filtering ---------------------------------------------------------------

def _pool_with_ids(n, iid="a"):
    rng = np.random.default_rng(4)
    pos = [ImageRecord(f"p{k}", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8), iid,
                       mask=np.ones((8, 8), bool)) for k in range(n)]
    neg = [ImageRecord("n0", np.zeros((8, 8, 3), np.uint8), "negative")]
    prov = {r.id: Provenance("cut_paste", 0) for r in pos + neg}
    return SyntheticPool(iid, pos, neg, prov)


def _unit_metric(px):
    v = np.asarray(px, np.float64).ravel()[:12] + 1.0
    return v / np.linalg.norm(v)


def test_filter_threshold_is_inclusive():
    pool = _pool_with_ids(3)
    scores = {"p0": 0.59, "p1": 0.60, "p2": 0.61}
    out = filter_pool(pool, [], _unit_metric, threshold=0.6, scores=scores)
    assert [r.id for r in out.positives] == ["p1", "p2"]
    assert out.negatives == pool.negatives
    assert out.provenance["p1"].extra["filter_score"] == 0.60


def test_filter_pass_all(small_pool, toy_dataset):
    refs = toy_dataset[small_pool.instance_id].train
    out = filter_pool(small_pool, refs, _unit_metric, threshold=-1.0)
    assert [r.id for r in out.positives] == [r.id for r in small_pool.positives]


def test_self_similarity_scores_one():
    pool = _pool_with_ids(2)
    refs = list(pool.positives)
    out = filter_pool(pool, refs, _unit_metric, threshold=1.0 - 1e-12)
    assert len(out.positives) == 2
    assert all(abs(out.provenance[r.id].extra["filter_score"] - 1.0) < 1e-12 for r in out.positives)


def test_filter_idempotent(small_pool, toy_dataset, toy_encoder):
    from persrep.analysis import encoder_metric

    refs = toy_dataset[small_pool.instance_id].train
    metric = encoder_metric(toy_encoder)
    once = filter_pool(small_pool, refs, metric, threshold=0.8)
    twice = filter_pool(once, refs, metric, threshold=0.8)
    assert [r.id for r in once.positives] == [r.id for r in twice.positives]


# -- pool synthesis ----------------------------------------------------------

def test_pool_sizes_at_paper_scale(toy_dataset):
    pool = synthesize_pool(toy_dataset, toy_dataset.ids[0], GeneratorConfig(n_positives=450, n_negatives=1000))
    assert (len(pool.positives), len(pool.negatives)) == (450, 1000)


def test_empty_positive_pool_is_valid(toy_dataset):
    pool = synthesize_pool(toy_dataset, toy_dataset.ids[0], GeneratorConfig(n_positives=0, n_negatives=5))
    assert pool.positives == () and len(pool.negatives) == 5


def test_pool_reproducible_serial_and_threaded(toy_dataset):
    cfg = GeneratorConfig(n_positives=20, n_negatives=20, seed=9)
    a = synthesize_pool(toy_dataset, toy_dataset.ids[1], cfg)
    b = synthesize_pool(toy_dataset, toy_dataset.ids[1], cfg, workers=3)
    assert a.digest() == b.digest()
    assert [r.digest() for r in a.positives] == [r.digest() for r in b.positives]
    c = synthesize_pool(toy_dataset, toy_dataset.ids[1], GeneratorConfig(n_positives=20, n_negatives=20, seed=10))
    assert c.digest() != a.digest()


def test_unregistered_generator(toy_dataset):
    with pytest.raises(errors.ExternalGeneratorError):
        synthesize_pool(toy_dataset, toy_dataset.ids[0], GeneratorConfig(kind="dreambooth_like", n_positives=1))


def test_registered_generator(toy_dataset):
    class Fake:
        def generate(self, instance_id, caption, cfg_scale, seed, n):
            return [np.full((64, 64, 3), seed % 256, np.uint8)] * n

    register_generator("dreambooth_like", Fake())
    try:
        pool = synthesize_pool(toy_dataset, toy_dataset.ids[0],
                               GeneratorConfig(kind="dreambooth_like", n_positives=3, n_negatives=2, cfg_scale=7.5))
    finally:
        unregister_generator("dreambooth_like")
    assert len(pool.positives) == 3
    assert all(pool.provenance[r.id].cfg == 7.5 for r in pool.positives)


# -- external client ---------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    requests = []

    def do_POST(self):
        doc = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.requests.append(doc)
        img = np.full((6, 6, 3), doc["seed"] % 256, np.uint8)
        body = json.dumps({"images": [encode_png(img)] * doc["n"]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def test_http_client_round_trip():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        client = ExternalGeneratorClient(f"http://127.0.0.1:{server.server_port}/", timeout_s=5)
        imgs = client.generate("mug1", "A <new1> mug", 5.0, 17, 2)
    finally:
        server.shutdown()
    assert len(imgs) == 2 and imgs[0].shape == (6, 6, 3) and int(imgs[0][0, 0, 0]) == 17
    assert _Handler.requests[-1] == {"instance_id": "mug1", "caption": "A <new1> mug", "cfg_scale": 5.0,
                                     "seed": 17, "n": 2}


def test_http_client_unreachable():
    client = ExternalGeneratorClient("http://127.0.0.1:9/", timeout_s=0.5, retries=1, backoff_s=0.0)
    with pytest.raises(errors.ExternalGeneratorError):
        client.generate("a", "b", 5.0, 0, 1)


def test_http_client_without_endpoint(monkeypatch):
    monkeypatch.delenv("PERSREP_GEN_ENDPOINT", raising=False)
    with pytest.raises(errors.BackendUnavailable):
        ExternalGeneratorClient().generate("a", "b", 5.0, 0, 1)
