import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from etherlab.nets import MessageBatch
from etherlab.refgame import (
    AugmentConfig,
    ChannelDomainError,
    GameConfig,
    Listener,
    Speaker,
    StgsChannel,
    augment,
    eos_pointmass_kl,
    game_losses,
    generic_kl,
    hinge_loss,
    impatient_loss,
    lazy_loss,
    learned_temperature,
    linear_beta,
    listener_decision,
    play_game_step,
    sample_stimulus_batch,
    stgs_sample,
)
from etherlab.vocab import EOS


def make_pair(hidden=16, vocab=16, max_len=5, seed=0, stim_dim=8):
    torch.manual_seed(seed)
    enc = torch.nn.Sequential(torch.nn.Linear(stim_dim, hidden), torch.nn.ReLU(),
                              torch.nn.Linear(hidden, hidden))
    return (Speaker(enc, vocab, hidden, max_len), Listener(enc, vocab, hidden))


# ----------------------------------------------------------------- channel


def test_stgs_point_mass_always_wins():
    logits = torch.tensor([[0.0, 0.0, 1000.0, 0.0]])
    for seed in range(20):
        hard, _ = stgs_sample(logits, 0.7, torch.Generator().manual_seed(seed))
        assert hard.argmax().item() == 2
        assert hard.sum().item() == 1.0


def test_stgs_forward_is_exact_onehot():
    torch.manual_seed(0)
    logits = torch.randn(64, 10)
    hard, relaxed = stgs_sample(logits, 1.0, torch.Generator().manual_seed(3))
    assert torch.all(hard.sum(-1) == 1.0)
    assert torch.all((hard > 0).sum(-1) == 1)
    assert torch.all(hard[hard > 0] == 1.0)
    assert not torch.allclose(hard, relaxed)  # relaxed really is relaxed


def test_stgs_rejects_nonpositive_temperature():
    with pytest.raises(ChannelDomainError):
        stgs_sample(torch.randn(2, 4), 0.0)
    with pytest.raises(ChannelDomainError):
        stgs_sample(torch.randn(2, 4), -1.0)


def test_stgs_frequencies_match_categorical():
    # Gumbel-max property at a desk-test sample size; the acceptance suite
    # reruns this at 1e5 samples.
    p = torch.tensor([0.5, 0.25, 0.15, 0.1])
    logits = torch.log(p).expand(20_000, 4)
    hard, _ = stgs_sample(logits, 0.61, torch.Generator().manual_seed(11))
    freq = hard.mean(0)
    se = torch.sqrt(p * (1 - p) / 20_000)
    assert torch.all((freq - p).abs() <= 4 * se)


def test_stgs_backward_equals_relaxed_path():
    # Linear probe: gradients through the straight-through output must match
    # gradients through the relaxed sample exactly.
    torch.manual_seed(1)
    logits_a = torch.randn(6, 8, requires_grad=True)
    logits_b = logits_a.detach().clone().requires_grad_(True)
    probe = torch.randn(6, 8)
    hard, _ = stgs_sample(logits_a, 0.9, torch.Generator().manual_seed(5))
    (hard * probe).sum().backward()
    _, relaxed = stgs_sample(logits_b, 0.9, torch.Generator().manual_seed(5))
    (relaxed * probe).sum().backward()
    assert torch.allclose(logits_a.grad, logits_b.grad, atol=1e-5)


def test_learned_temperature_closed_form_and_limits():
    tau = learned_temperature(torch.tensor(0.0), tau0=0.2)
    assert math.isclose(tau.item(), 1.0 / (0.2 + math.log(2)), rel_tol=1e-6)
    assert learned_temperature(torch.tensor(40.0), 0.2).item() < 1e-6 + 0.026
    assert math.isclose(
        learned_temperature(torch.tensor(-40.0), 0.2).item(), 5.0, rel_tol=1e-5
    )
    with pytest.raises(ChannelDomainError):
        learned_temperature(torch.tensor(0.0), 0.0)


def test_temperature_is_decreasing_in_alpha():
    alphas = torch.linspace(-5, 5, 21)
    taus = learned_temperature(alphas, 0.3)
    assert torch.all(taus[1:] < taus[:-1])


# ------------------------------------------------------------ augmentation


def test_augment_zero_strength_is_bitwise_identity():
    x = torch.rand(3, 64, 64)
    out = augment(x, seed=3, config=AugmentConfig(0.0, 0.0, 0.0, 0.0))
    assert torch.equal(out, x)


def test_augment_seed_determinism():
    x = torch.rand(3, 64, 64)
    cfg = AugmentConfig()
    assert torch.equal(augment(x, 42, cfg), augment(x, 42, cfg))


def test_augment_distinct_seeds_give_distinct_views():
    torch.manual_seed(2)
    x = torch.rand(3, 64, 64)
    cfg = AugmentConfig()
    differing = sum(
        not torch.equal(augment(x, 2 * s, cfg), augment(x, 2 * s + 1, cfg))
        for s in range(50)
    )
    assert differing >= 50 * 0.99


def test_augment_stays_in_unit_range():
    x = torch.rand(3, 64, 64)
    out = augment(x, 9, AugmentConfig(2.0, 0.9, 0.3, 45.0))
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert out.shape == x.shape


# ------------------------------------------------------ listener decision


def _eos_message(batch, vocab):
    onehot = torch.zeros(batch, 1, vocab)
    onehot[:, 0, EOS] = 1.0
    return MessageBatch(onehot=onehot, lengths=torch.ones(batch, dtype=torch.long))


def test_listener_equal_dot_products_give_uniform():
    _, listener = make_pair()
    msg = _eos_message(1, 16)
    features = torch.ones(1, 4, 16)  # identical candidates, equal logits
    probs = listener_decision(listener, msg, features)
    assert torch.allclose(probs, torch.full((1, 4), 0.25), atol=1e-6)


def test_listener_k1_closed_form():
    _, listener = make_pair(seed=3)
    msg = _eos_message(1, 16)
    # Recover h_L, then build candidates whose dot products are exactly (2, 0).
    with torch.no_grad():
        h = listener.message_encoder(msg.onehot)[0, 0]
    f0 = (2.0 * h / h.pow(2).sum()).view(1, 1, -1)
    f1 = torch.zeros_like(f0)
    probs = listener_decision(listener, msg, torch.cat([f0, f1], dim=1))
    expected = torch.softmax(torch.tensor([2.0, 0.0]), dim=-1)
    assert torch.allclose(probs[0], expected, atol=1e-5)
    assert math.isclose(probs[0, 0].item(), 0.8808, abs_tol=2e-4)
    assert math.isclose(probs[0, 1].item(), 0.1192, abs_tol=2e-4)


def test_listener_shift_invariance():
    _, listener = make_pair(seed=4)
    msg = _eos_message(1, 16)
    with torch.no_grad():
        h = listener.message_encoder(msg.onehot)[0, 0]
    features = torch.randn(1, 5, 16)
    shifted = features + 3.7 * h / h.pow(2).sum()  # adds a constant to every logit
    p0 = listener_decision(listener, msg, features)
    p1 = listener_decision(listener, msg, shifted)
    assert torch.allclose(p0, p1, atol=1e-5)


def test_listener_descriptive_has_extra_outcome_and_sums_to_one():
    torch.manual_seed(5)
    enc = torch.nn.Linear(8, 16)
    listener = Listener(enc, 16, 16, descriptive=True)
    msg = _eos_message(2, 16)
    probs = listener_decision(listener, msg, torch.randn(2, 4, 16))
    assert probs.shape == (2, 5)  # K+2 outcomes for K=3
    assert torch.allclose(probs.sum(-1), torch.ones(2), atol=1e-6)


def test_listener_empty_message_is_eos_message():
    _, listener = make_pair(seed=6)
    features = torch.randn(1, 3, 16)
    empty = MessageBatch(onehot=torch.zeros(1, 0, 16),
                         lengths=torch.zeros(1, dtype=torch.long))
    probs = listener_decision(listener, empty, features)
    reference = listener_decision(listener, _eos_message(1, 16), features)
    assert torch.allclose(probs, reference, atol=1e-6)


# ------------------------------------------------------------------ losses


def test_lazy_loss_zero_when_all_mass_on_eos():
    dist = torch.zeros(1, 3, 16)
    dist[:, :, EOS] = 1.0
    loss = lazy_loss(dist, torch.tensor([3]), linear_beta(1.0))
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_lazy_loss_uniform_single_step_is_log_vocab():
    dist = torch.full((1, 1, 64), 1 / 64.0)
    loss = lazy_loss(dist, torch.tensor([1]), beta=lambda l: 1.0)
    assert loss.item() == pytest.approx(math.log(64), abs=1e-6)


def test_generic_kl_matches_closed_form_on_random_distributions():
    torch.manual_seed(7)
    for _ in range(50):
        q = torch.softmax(torch.randn(8, 64), dim=-1)
        point = torch.zeros_like(q)
        point[:, EOS] = 1.0
        assert torch.allclose(
            generic_kl(point, q), eos_pointmass_kl(q), atol=1e-6
        )


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=0, max_value=15).filter(lambda i: i != EOS),
    st.floats(min_value=1e-4, max_value=0.4),
)
def test_lazy_loss_monotone_in_mass_moved_off_eos(token, delta):
    base = torch.full((1, 1, 16), 1 / 32.0)
    base[0, 0, EOS] = 0.5
    moved = base.clone()
    moved[0, 0, EOS] -= delta
    moved[0, 0, token] += delta
    lengths = torch.tensor([1])
    assert lazy_loss(moved, lengths).item() >= lazy_loss(base, lengths).item()


def test_hinge_loss_zero_when_margin_satisfied():
    logits = torch.tensor([[5.0, 0.0, 1.0, 3.9]])
    assert hinge_loss(logits, torch.tensor([0])).item() == pytest.approx(0.0)


def test_hinge_loss_direct_value():
    logits = torch.tensor([[1.0, 0.5, 1.5]])
    # target 0: sum over j!=0 of max(0, 1 - 1 + l_j) = 0.5 + 1.5
    assert hinge_loss(logits, torch.tensor([0])).item() == pytest.approx(2.0)


def test_impatient_loss_zero_when_every_prefix_separates_by_margin():
    prefix = torch.tensor([[[3.0, 0.0, 1.0], [4.0, 1.0, 0.0]]])
    loss = impatient_loss(prefix, torch.tensor([2]), torch.tensor([0]))
    assert loss.item() == pytest.approx(0.0)


def test_impatient_loss_is_mean_of_per_prefix_losses():
    torch.manual_seed(8)
    prefix = torch.randn(3, 4, 5)
    lengths = torch.tensor([4, 2, 3])
    targets = torch.tensor([1, 0, 4])
    loss = impatient_loss(prefix, lengths, targets)
    manual = []
    for b in range(3):
        per = [
            hinge_loss(prefix[b, l].unsqueeze(0), targets[b].unsqueeze(0)).item()
            for l in range(lengths[b])
        ]
        manual.append(sum(per) / len(per))
    assert loss.item() == pytest.approx(float(np.mean(manual)), abs=1e-6)


def test_impatient_loss_single_prefix_equals_hinge():
    torch.manual_seed(9)
    prefix = torch.randn(1, 1, 6)
    target = torch.tensor([2])
    loss = impatient_loss(prefix, torch.tensor([1]), target)
    assert loss.item() == pytest.approx(
        hinge_loss(prefix[:, 0], target).item(), abs=1e-6
    )


# ---------------------------------------------------------------- the game


def _symbolic_setup(seed=0, n=16, k=3, batch=16):
    torch.manual_seed(seed)
    stimuli = torch.eye(n)
    cfg = GameConfig(distractors=k, batch_size=batch,
                     augment=AugmentConfig(0, 0, 0, 0))
    enc = torch.nn.Sequential(torch.nn.Linear(n, 32), torch.nn.ReLU(),
                              torch.nn.Linear(32, 32))
    speaker = Speaker(enc, cfg.vocab_size, 32, cfg.max_len)
    listener = Listener(enc, cfg.vocab_size, 32)
    params = {id(p): p for p in list(speaker.parameters()) + list(listener.parameters())}
    opt = torch.optim.Adam(list(params.values()), lr=1e-3)
    return stimuli, cfg, speaker, listener, opt


def test_untrained_accuracy_near_chance():
    stimuli, cfg, speaker, listener, _ = _symbolic_setup(seed=1)
    rng = np.random.default_rng(0)
    gen = torch.Generator().manual_seed(0)
    channel = StgsChannel(cfg.tau0)
    hits, total = 0, 0
    with torch.no_grad():
        for _ in range(40):
            batch = sample_stimulus_batch(stimuli, 25, cfg, rng)
            _, _, _, acc, _ = game_losses(speaker, listener, batch, cfg, channel, gen)
            hits += acc * 25
            total += 25
    chance = 1.0 / (cfg.distractors + 1)
    se = math.sqrt(chance * (1 - chance) / total)
    assert abs(hits / total - chance) <= 4 * se


def test_play_game_step_reaches_speaker_and_total_is_sum():
    stimuli, cfg, speaker, listener, opt = _symbolic_setup(seed=2)
    rng = np.random.default_rng(1)
    gen = torch.Generator().manual_seed(1)
    batch = sample_stimulus_batch(stimuli, cfg.batch_size, cfg, rng)
    channel = StgsChannel(cfg.tau0)
    total, lazy, impatient, _, _ = game_losses(
        speaker, listener, batch, cfg, channel, torch.Generator().manual_seed(1)
    )
    assert total.item() == pytest.approx(lazy.item() + impatient.item(), abs=1e-7)
    result = play_game_step(speaker, listener, batch, cfg, opt, channel, gen)
    assert result.speaker_grad_norm > 0.0
    assert result.loss == pytest.approx(result.lazy + result.impatient, abs=1e-5)


def test_messages_keep_nothing_after_eos():
    stimuli, cfg, speaker, _, _ = _symbolic_setup(seed=3)
    gen = torch.Generator().manual_seed(2)
    msg = speaker(stimuli, channel=StgsChannel(cfg.tau0), generator=gen)
    for b, ids in enumerate(msg.token_ids()):
        assert EOS not in ids[:-1]
        after = msg.onehot[b, msg.lengths[b] :]
        assert torch.all(after == 0)


def test_descriptive_batches_label_absent_targets():
    torch.manual_seed(4)
    stimuli = torch.eye(12)
    cfg = GameConfig(distractors=3, descriptive=True, descriptive_target_prob=0.5,
                     batch_size=64, augment=AugmentConfig(0, 0, 0, 0))
    rng = np.random.default_rng(3)
    batch = sample_stimulus_batch(stimuli, 64, cfg, rng)
    no_target = (batch.target_index == cfg.distractors + 1).float().mean().item()
    assert 0.2 < no_target < 0.8
    assert batch.listener_views.shape[1] == cfg.distractors + 1


def test_game_config_validation():
    with pytest.raises(ValueError):
        GameConfig(vocab_size=8)
    with pytest.raises(ValueError):
        GameConfig(distractors=-1)
    with pytest.raises(ChannelDomainError):
        GameConfig(tau0=0.0)


def test_speaker_grad_flows_through_channel_not_elsewhere():
    stimuli, cfg, speaker, listener, opt = _symbolic_setup(seed=5)
    rng = np.random.default_rng(4)
    batch = sample_stimulus_batch(stimuli, 8, cfg, rng)
    msg = speaker(batch.speaker_views, channel=StgsChannel(cfg.tau0),
                  generator=torch.Generator().manual_seed(0))
    feats = listener.encode_candidates(batch.listener_views)
    prefix = listener.prefix_logits(msg.onehot, feats)
    loss = impatient_loss(prefix, msg.lengths, batch.target_index)
    grads = torch.autograd.grad(loss, list(speaker.decoder.parameters()),
                                allow_unused=True, retain_graph=True)
    norms = [g.abs().sum().item() for g in grads if g is not None]
    assert sum(norms) > 0
