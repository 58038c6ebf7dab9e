import math
import sys
import textwrap

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semdepth.embedding import (
    ADE20K_CLASSES,
    EMBED_DIM,
    NUM_CLASSES,
    ContextMLP,
    ExternalSegmenter,
    SemanticContext,
    TokenProjector,
    ToySegmenter,
    ToySegmenterNet,
    context_to_embedding,
    embed_to_tokens,
    extract_semantic_context,
    gelu,
)
from semdepth.errors import AdapterError, ValidationError


def phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def test_gelu_examples():
    assert gelu(0.0) == 0.0
    assert abs(gelu(10.0) - 10.0) < 1e-9
    assert gelu(1.0) == pytest.approx(0.8413447460685429, abs=1e-15)
    assert gelu(2.0) == pytest.approx(1.9544997361036416, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30))
def test_gelu_matches_torch_exact_variant(x):
    ref = torch.nn.functional.gelu(torch.tensor(x, dtype=torch.float64)).item()
    assert gelu(x) == pytest.approx(ref, rel=1e-12, abs=1e-300)
    assert gelu(x) == pytest.approx(x * phi(x), rel=1e-12, abs=1e-300)


def _double(m):
    return m.double()


def test_zero_params_give_zero_embedding():
    mlp = _double(ContextMLP())
    for p in mlp.parameters():
        torch.nn.init.zeros_(p)
    out = context_to_embedding(SemanticContext(np.random.default_rng(0).normal(size=150)), mlp).values
    assert out.shape == (EMBED_DIM,)
    assert torch.count_nonzero(out) == 0


def test_zero_context_propagates_bias_pattern():
    mlp = _double(ContextMLP(hidden=8))
    with torch.no_grad():
        mlp.fc1.weight.zero_()
        mlp.fc1.bias.copy_(torch.linspace(-1, 1, 8))
    out = context_to_embedding(np.zeros(150), mlp).values
    hidden = torch.tensor([gelu(b) for b in mlp.fc1.bias.tolist()], dtype=torch.float64)
    ref = mlp.fc2.weight @ hidden + mlp.fc2.bias
    torch.testing.assert_close(out, ref, rtol=1e-14, atol=1e-14)


def test_hand_forward_pass_width_one():
    mlp = _double(ContextMLP(hidden=1))
    with torch.no_grad():
        for p in mlp.parameters():
            p.zero_()
        mlp.fc1.weight[0, 0] = 2.0
        mlp.fc2.weight[0, 0] = 0.5
    ctx = np.zeros(150)
    ctx[0] = 1.0
    out = context_to_embedding(SemanticContext(ctx), mlp).values
    assert out[0].item() == pytest.approx(0.5 * gelu(2.0), rel=1e-15)
    assert out[0].item() == pytest.approx(0.97724987, abs=1e-8)
    assert torch.count_nonzero(out[1:]) == 0


def _fd_jacobian(f, x, h=1e-6):
    cols = []
    for i in range(x.numel()):
        e = torch.zeros_like(x)
        e.view(-1)[i] = h
        cols.append(((f(x + e) - f(x - e)) / (2 * h)).reshape(-1))
    return torch.stack(cols, dim=1)


def test_embedding_jacobian_matches_finite_differences():
    torch.manual_seed(0)
    mlp = _double(ContextMLP(hidden=32))
    x = torch.randn(150, dtype=torch.float64)
    jac = torch.autograd.functional.jacobian(lambda c: context_to_embedding(c, mlp).values, x)
    fd = _fd_jacobian(lambda c: context_to_embedding(c, mlp).values, x)
    assert ((jac - fd).abs().max() / fd.abs().max()).item() < 1e-5


def test_full_chain_gradient_double_and_single_precision():
    torch.manual_seed(1)
    for dtype, tol, h in ((torch.float64, 1e-6, 1e-6), (torch.float32, 1e-4, 1e-2)):
        mlp = ContextMLP(hidden=64).to(dtype)
        proj = TokenProjector(3, 16).to(dtype)
        x = torch.randn(150, dtype=torch.float64)
        w = torch.randn(3, 16, dtype=torch.float64)

        def f(c):
            return (embed_to_tokens(context_to_embedding(c.to(dtype), mlp), proj).tokens.double() * w).sum()

        xg = x.to(dtype).requires_grad_(True)
        (g,) = torch.autograd.grad(f(xg), xg)
        # directional derivative along the gradient (one well-conditioned probe per dtype)
        d = g.double() / g.double().norm()
        fd = (f(x + h * d) - f(x - h * d)) / (2 * h)
        exact = (g.double() * d).sum()
        assert abs((fd - exact) / exact).item() < tol


def test_tokens_zero_and_identity():
    proj = TokenProjector(1, 100).double()
    with torch.no_grad():
        proj.proj.weight.copy_(torch.eye(100))
        proj.proj.bias.zero_()
    emb = torch.randn(100, dtype=torch.float64)
    tok = embed_to_tokens(emb, proj, 1, 100)
    assert tok.num_tokens == 1 and tok.token_dim == 100
    torch.testing.assert_close(tok.tokens[0], emb, rtol=0, atol=0)
    assert torch.count_nonzero(embed_to_tokens(torch.zeros(100, dtype=torch.float64), proj).tokens) == 0


def test_tokens_match_matrix_vector_oracle():
    torch.manual_seed(2)
    proj = TokenProjector(4, 8).double()
    emb = np.random.default_rng(3).normal(size=100)
    out = embed_to_tokens(emb, proj).tokens.detach().numpy()
    W = proj.proj.weight.detach().numpy()
    b = proj.proj.bias.detach().numpy()
    ref = np.array([sum(W[r, c] * emb[c] for c in range(100)) + b[r] for r in range(32)])
    np.testing.assert_allclose(out.reshape(-1), ref, rtol=0, atol=1e-12)


def test_dimension_contract_errors():
    with pytest.raises(ValidationError):
        ContextMLP(in_dim=100)
    with pytest.raises(ValidationError):
        ContextMLP(out_dim=64)
    with pytest.raises(ValidationError):
        TokenProjector(0, 8)
    with pytest.raises(ValidationError):
        TokenProjector(2, 8, in_dim=50)
    with pytest.raises(ValidationError):
        context_to_embedding(np.zeros(100), ContextMLP())
    with pytest.raises(ValidationError):
        embed_to_tokens(np.zeros(150), TokenProjector(2, 8))
    with pytest.raises(ValidationError):
        embed_to_tokens(np.zeros(100), TokenProjector(2, 8), num_tokens=3)
    with pytest.raises(ValidationError):
        SemanticContext(np.zeros(149))
    with pytest.raises(ValidationError):
        SemanticContext(np.full(150, np.nan))


@settings(max_examples=20, deadline=None)
@given(num_tokens=st.integers(1, 6), token_dim=st.integers(1, 40), batch=st.integers(1, 3))
def test_dimension_chain_holds_for_all_configs(num_tokens, token_dim, batch):
    mlp = ContextMLP(hidden=16)
    proj = TokenProjector(num_tokens, token_dim)
    tok = embed_to_tokens(context_to_embedding(torch.randn(batch, 150), mlp), proj)
    assert tuple(tok.tokens.shape) == (batch, num_tokens, token_dim)


def test_embedding_is_deterministic():
    torch.manual_seed(4)
    mlp, proj = ContextMLP(), TokenProjector(4, 32)
    x = np.random.default_rng(5).normal(size=150)
    a = embed_to_tokens(context_to_embedding(x, mlp), proj).tokens
    b = embed_to_tokens(context_to_embedding(x.copy(), mlp), proj).tokens
    assert torch.equal(a, b)


def test_class_names():
    assert len(ADE20K_CLASSES) == NUM_CLASSES == len(set(ADE20K_CLASSES))
    for name in ("wall", "floor", "ceiling", "ball"):
        assert name in ADE20K_CLASSES
    assert ADE20K_CLASSES[0] == "wall"


def test_black_image_through_fresh_toy_segmenter():
    torch.manual_seed(0)
    seg = ToySegmenter(ToySegmenterNet())
    assert torch.count_nonzero(seg.net.classifier.bias) == 0
    ctx = extract_semantic_context(np.zeros((32, 48, 3)), seg)
    assert ctx.logits.shape == (150,) and np.all(np.isfinite(ctx.logits))
    assert ctx.class_names == list(ADE20K_CLASSES)


def test_identical_images_give_identical_contexts():
    torch.manual_seed(1)
    seg = ToySegmenter(ToySegmenterNet())
    img = np.random.default_rng(0).random((64, 64, 3))
    a = extract_semantic_context(img, seg).logits
    b = extract_semantic_context(img.copy(), seg).logits
    assert np.array_equal(a, b)


def test_extract_rejects_bad_images():
    seg = ToySegmenter(ToySegmenterNet())
    with pytest.raises(ValidationError):
        extract_semantic_context(np.full((8, 8, 3), 1.5), seg)
    with pytest.raises(ValidationError):
        extract_semantic_context(np.zeros((8, 8)), seg)


def _script(tmp_path, body):
    path = tmp_path / "tool.py"
    path.write_text(textwrap.dedent(body))
    return [sys.executable, str(path), "{input}", "{output}"]


def test_external_segmenter_round_trip(tmp_path):
    cmd = _script(tmp_path, """
        import sys
        with open(sys.argv[2], "w") as f:
            for i in range(150):
                f.write(f"{i * 0.5 - 3}\\n")
    """)
    ctx = extract_semantic_context(np.zeros((8, 8, 3)), ExternalSegmenter(cmd))
    np.testing.assert_array_equal(ctx.logits, np.arange(150) * 0.5 - 3)


def test_external_segmenter_wrong_length(tmp_path):
    cmd = _script(tmp_path, """
        import sys
        open(sys.argv[2], "w").write("1.0\\n" * 100)
    """)
    with pytest.raises(AdapterError):
        extract_semantic_context(np.zeros((8, 8, 3)), ExternalSegmenter(cmd))


def test_external_segmenter_unavailable(tmp_path):
    with pytest.raises(AdapterError):
        ExternalSegmenter([str(tmp_path / "missing-binary"), "{input}"]).logits(np.zeros((4, 4, 3)))
    with pytest.raises(ValidationError):
        ExternalSegmenter([])


def test_trained_segmenter_recovers_dominant_class(trained_run):
    pipe, splits, stages = trained_run["pipe"], trained_run["splits"], trained_run["stages"]
    from semdepth import dataset as ds

    def accuracy(samples):
        return np.mean([int(np.argmax(extract_semantic_context(s.image, pipe.segmenter).logits)) ==
                        ADE20K_CLASSES.index(s.dominant_class) for s in samples])

    assert stages["segmenter"]["train_accuracy"] > 0.9
    assert accuracy(splits.all) > 0.9
    wall = next(s for s in splits.train if s.dominant_class == "wall")
    assert ADE20K_CLASSES[int(np.argmax(extract_semantic_context(wall.image, pipe.segmenter).logits))] == "wall"
    # scenes never seen in training: looser, just checks it generalizes at all
    assert accuracy(ds.corpus("synthetic", 50, 777).all) > 0.8
