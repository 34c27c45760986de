import numpy as np
import pytest

from s2gs import autodiff as ad
from s2gs.autodiff import Adam, Tensor
from s2gs.errors import ContractError, VocabularyError
from s2gs.openvocab import (
    Projector,
    SemanticSpace,
    cosine_loss,
    distill_step,
    grounding_miou,
    retrieve,
)

from helpers import assert_grads_close

LABELS = ["crate", "ball", "lamp"]


@pytest.fixture()
def space():
    return SemanticSpace(LABELS, dim=16, seed=1, noise=0.05)


def test_space_embeddings_orthonormal(space):
    e = space.embeddings
    gram = e @ e.T
    np.testing.assert_allclose(gram, np.eye(len(LABELS)), atol=1e-5)


def test_unknown_label_rejected(space):
    with pytest.raises(VocabularyError):
        space.embed_label("submarine")


def test_teacher_embed_noiseless_exact():
    space = SemanticSpace(LABELS, dim=16, seed=1, noise=0.0)
    frame = np.zeros((16, 16, 3), dtype=np.float32)
    sem = np.zeros((16, 16), dtype=np.uint16)
    sem[4:12, 4:12] = 2
    mask = sem == 2
    v = space.teacher_embed(frame, mask, sem, min_area=16)
    np.testing.assert_allclose(v, space.embed_label("ball"), atol=1e-6)


def test_teacher_embed_same_object_high_cosine(space):
    frame = np.zeros((16, 16, 3), dtype=np.float32)
    sem = np.zeros((16, 16), dtype=np.uint16)
    sem[2:14, 2:14] = 3
    m1 = np.zeros_like(sem, dtype=bool)
    m1[2:8, 2:14] = True
    m2 = np.zeros_like(sem, dtype=bool)
    m2[8:14, 2:14] = True
    cosines = []
    for _ in range(20):
        v1 = space.teacher_embed(frame, m1, sem, min_area=16)
        v2 = space.teacher_embed(frame, m2, sem, min_area=16)
        cosines.append(float(v1 @ v2))
    assert np.mean(cosines) > 0.99


def test_teacher_embed_rejects_small_mask(space):
    frame = np.zeros((16, 16, 3), dtype=np.float32)
    sem = np.ones((16, 16), dtype=np.uint16)
    mask = np.zeros((16, 16), dtype=bool)
    mask[0, :4] = True  # area 4 < 16
    assert space.teacher_embed(frame, mask, sem, min_area=16) is None


def test_vocabulary_roundtrip(tmp_path, space):
    path = tmp_path / "vocab.tsv"
    space.save_vocabulary(path)
    loaded = SemanticSpace.load_vocabulary(path)
    assert loaded.labels == LABELS
    np.testing.assert_allclose(loaded.embeddings, space.embeddings, atol=1e-6)
    first = path.read_text().splitlines()[0]
    assert first.startswith("crate\t")


def test_projector_outputs_unit_norm():
    proj = Projector(8, 16, seed=2)
    rng = np.random.default_rng(3)
    u = proj.project_np(rng.normal(size=(5, 8)).astype(np.float32))
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-6)


def test_projector_deterministic():
    proj = Projector(8, 16, seed=2)
    q = np.random.default_rng(4).normal(size=(3, 8)).astype(np.float32)
    assert np.array_equal(proj.project_np(q), proj.project_np(q))


def test_projector_cosine_gradcheck():
    rng = np.random.default_rng(5)
    teacher = rng.normal(size=(2, 6))
    teacher /= np.linalg.norm(teacher, axis=1, keepdims=True)
    q = rng.uniform(-1, 1, (2, 4))
    w1 = rng.uniform(-0.5, 0.5, (4, 8))
    w2 = rng.uniform(-0.5, 0.5, (8, 6))

    def fn(w1_, w2_):
        h = ad.relu(ad.matmul(Tensor(q, dtype=np.float64), w1_))
        u = ad.l2_normalize(ad.matmul(h, w2_), axis=-1)
        return cosine_loss(u, teacher)

    assert_grads_close(fn, [w1, w2])


def test_distill_loss_zero_when_aligned(space):
    proj = Projector(4, 16, seed=6)
    q = np.random.default_rng(7).normal(size=(1, 4)).astype(np.float32)
    v = proj.project_np(q)[0]
    loss = cosine_loss(proj.project(Tensor(q)), v[None])
    assert float(loss.data) == pytest.approx(0.0, abs=1e-6)


def test_cosine_loss_opposite_is_two():
    u = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
    assert float(cosine_loss(u, np.array([[-1.0, 0.0]])).data) == pytest.approx(2.0)


def test_distill_step_trains_only_projector(space):
    proj = Projector(4, 16, seed=8)
    rng = np.random.default_rng(9)
    groups = []
    for i in range(4):
        queries = rng.normal(size=(3, 4)).astype(np.float32)
        groups.append((queries, space.embeddings[i % len(LABELS)]))
    opt = Adam(list(proj.params().values()), lr=1e-2)
    losses = [distill_step(proj, groups, rng, opt) for _ in range(60)]
    assert losses[-1] < losses[0]


def test_distill_identical_queries_aggregation_invariant(space):
    proj = Projector(4, 16, seed=10)
    q = np.tile(np.array([[0.5, -0.2, 0.1, 0.9]], dtype=np.float32), (4, 1))
    v = space.embeddings[0]
    u_single = proj.project_np(q[0:1])[0]
    weights = np.random.default_rng(11).dirichlet(np.ones(4)).astype(np.float32)
    u_blend = proj.project_np((weights @ q)[None])[0]
    np.testing.assert_allclose(u_single, u_blend, atol=1e-6)


def test_retrieve_exact_match_wins(space):
    e = space.embed_label("ball")
    projected = np.stack([space.embed_label("crate"), e, space.embed_label("lamp")])
    masks = np.zeros((3, 4, 4))
    masks[1, 1:3, 1:3] = 1.0
    n_star, mask, scores = retrieve(e, projected, masks)
    assert n_star == 1
    assert scores[1] == pytest.approx(1.0, abs=1e-6)
    assert mask.sum() == 4
    assert (np.abs(scores) <= 1.0 + 1e-6).all()


def test_retrieve_tie_breaks_lowest_index(space):
    e = space.embed_label("crate")
    projected = np.stack([e, e, e])
    masks = np.zeros((3, 2, 2))
    n_star, _, _ = retrieve(e, projected, masks)
    assert n_star == 0


def test_grounding_miou_values():
    gt = np.zeros((8, 8), dtype=bool)
    gt[:4] = True
    assert grounding_miou({"a": gt}, {"a": gt}) == pytest.approx(100.0)
    half = np.zeros((8, 8), dtype=bool)
    half[2:6] = True  # overlap 16, union 48 -> 1/3
    assert grounding_miou({"a": half}, {"a": gt}) == pytest.approx(100.0 / 3.0, abs=1e-4)
    assert grounding_miou({}, {"a": gt}) == 0.0
