import csv
import hashlib
from dataclasses import replace

import cv2
import numpy as np
import pytest
import torch

from core.da_trainer import (DATrainConfig, DomainAdaptationTrainer, ScheduleConfig, forward_generators,
                             generator_loss_terms, init_state, load_checkpoint, lr_linear, save_checkpoint, stylize,
                             stylize_manifest, tile_tensor, train, train_step)
from core.errors import CheckpointError, ConfigError, PreconditionError
from core.losses import SOBEL_X, SOBEL_Y, total_generator_loss, weighted_total
from core.raster_io import Manifest, read_histogram_csv
from core.style_stats import adain, channel_stats


def checksum(module) -> str:
    digest = hashlib.sha256()
    for p in module.parameters():
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def test_lr_linear_full_schedule():
    cfg = ScheduleConfig(lr_base=1e-4, iter_max=100000, iter_decay_start=75000)
    assert lr_linear(cfg, 0) == 1e-4
    assert lr_linear(cfg, 75000) == 1e-4
    assert abs(lr_linear(cfg, 87500) - 5e-5) < 1e-12
    assert lr_linear(cfg, 100000) == 0
    with pytest.raises(PreconditionError):
        lr_linear(cfg, 100001)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(iter_max=10, iter_decay_start=10).validate()
    with pytest.raises(ConfigError):
        ScheduleConfig(lr_base=0).validate()


def test_discriminator_schedule_uses_its_own_base(tiny_da_cfg):
    assert tiny_da_cfg.disc_schedule.lr_base == 1e-5
    assert tiny_da_cfg.disc_schedule.iter_max == tiny_da_cfg.schedule.iter_max


def test_train_step_contract(tiny_da_cfg, make_tile):
    state = init_state(tiny_da_cfg)
    gen_sums, disc_sums = [], []

    def spy(optimizer, record):
        original = optimizer.step

        def step(*args, **kwargs):
            result = original(*args, **kwargs)
            record()
            return result
        optimizer.step = step

    # snapshot the discriminators right after the generator update, and the generators after the discriminator update
    spy(state.opt_gen_b, lambda: disc_sums.append((checksum(state.disc_a), checksum(state.disc_b))))
    spy(state.opt_disc_b, lambda: gen_sums.append((checksum(state.gen_a), checksum(state.gen_b))))

    discs_before = (checksum(state.disc_a), checksum(state.disc_b))
    state, report = train_step(state, make_tile(), make_tile())

    assert state.iteration == 1
    assert disc_sums == [discs_before]
    assert (checksum(state.disc_a), checksum(state.disc_b)) != discs_before
    assert gen_sums == [(checksum(state.gen_a), checksum(state.gen_b))]

    assert state.stats_source.updates_seen == 1 and state.stats_target.updates_seen == 1
    assert state.current_lrs() == (lr_linear(tiny_da_cfg.schedule, 1), lr_linear(tiny_da_cfg.disc_schedule, 1))
    values = [float(v) for v in report.row(1)[1:]]
    assert all(np.isfinite(values)) and min(values) >= 0


def test_smoke_run_losses_finite(tiny_da_cfg, make_tile):
    cfg = replace(tiny_da_cfg, schedule=ScheduleConfig(iter_max=100, iter_decay_start=50))
    state = init_state(cfg)
    tiles_s = [make_tile() for _ in range(4)]
    tiles_t = [make_tile() for _ in range(4)]
    for i in range(100):
        state, report = train_step(state, tiles_s[i % 4], tiles_t[(i * 3) % 4])
        values = [float(v) for v in report.row(state.iteration)[1:]]
        assert all(np.isfinite(values)) and min(values) >= 0
    assert state.iteration == 100
    assert state.stats_source.updates_seen == 100
    with pytest.raises(PreconditionError):
        train_step(state, tiles_s[0], tiles_t[0])


def _sobel_reference(x: np.ndarray) -> np.ndarray:
    kx, ky = SOBEL_X.numpy().astype(np.float64), SOBEL_Y.numpy().astype(np.float64)
    gx = [cv2.filter2D(band, cv2.CV_64F, kx, borderType=cv2.BORDER_REFLECT_101) for band in x]
    gy = [cv2.filter2D(band, cv2.CV_64F, ky, borderType=cv2.BORDER_REFLECT_101) for band in x]
    return np.stack(gx + gy)


def test_loss_terms_match_reference(tiny_da_cfg, make_tile):
    state = init_state(tiny_da_cfg)
    for _ in range(5):
        state, _ = train_step(state, make_tile(), make_tile())
    for net in state.networks.values():
        net.double().eval()
    gen_a, gen_b = state.gen_a, state.gen_b
    weights = tiny_da_cfg.loss_weights

    def translate(content_gen, decoder_gen, image, style_gen, style_image):
        feats = content_gen.encode(image)
        style = channel_stats(style_gen.encode(style_image).bottleneck)
        return decoder_gen.decode(adain(feats.bottleneck, channel_stats(feats.bottleneck), style), feats.skips)

    def arr(t):
        return t.detach()[0].numpy()

    for _ in range(5):
        xs = make_tile().pixels.astype(np.float64)
        xt = make_tile().pixels.astype(np.float64)
        x_s, x_t = torch.from_numpy(xs)[None], torch.from_numpy(xt)[None]
        with torch.no_grad():
            fwd = forward_generators(state, x_s, x_t)
            report = total_generator_loss(generator_loss_terms(state, fwd, x_s, x_t), weights)

            fake_b = translate(gen_a, gen_b, x_s, gen_b, x_t)
            fake_a = translate(gen_b, gen_a, x_t, gen_a, x_s)
            rec_s = translate(gen_b, gen_a, fwd.fake_b, gen_a, fwd.fake_a)
            rec_t = translate(gen_a, gen_b, fwd.fake_a, gen_b, fwd.fake_b)
            self_s, self_t = gen_a(x_s), gen_b(x_t)
        assert torch.allclose(fake_b, fwd.fake_b, atol=1e-12)
        assert torch.allclose(fake_a, fwd.fake_a, atol=1e-12)

        cross = np.abs(xs - arr(rec_s)).mean() + np.abs(xt - arr(rec_t)).mean()
        self_rec = np.abs(xs - arr(self_s)).mean() + np.abs(xt - arr(self_t)).mean()
        grad = (np.abs(_sobel_reference(xs) - _sobel_reference(arr(fake_b))).mean()
                + np.abs(_sobel_reference(xt) - _sobel_reference(arr(fake_a))).mean())
        assert report.cross == pytest.approx(cross, abs=1e-6)
        assert report.self_rec == pytest.approx(self_rec, abs=1e-6)
        assert report.grad == pytest.approx(grad, abs=1e-6)
        total = (weights.adv * (report.adv_g_st + report.adv_g_ts) + weights.cross * cross
                 + weights.self_rec * self_rec + weights.grad * grad)
        assert report.total_g == pytest.approx(total, abs=1e-6)


def test_self_reconstruction_bypasses_style(tiny_da_cfg, make_tile):
    state = init_state(tiny_da_cfg)
    calls = []
    hooks = [gen.style.register_forward_hook(lambda m, i, o, name=name: calls.append(name))
             for name, gen in (('a', state.gen_a), ('b', state.gen_b))]
    forward_generators(state, tile_tensor(make_tile()), tile_tensor(make_tile()))
    for h in hooks:
        h.remove()
    # two translations and two cross reconstructions; self paths add none
    assert sorted(calls) == ['a', 'a', 'b', 'b']


def test_checkpoint_layout_and_resume(tmp_path, tiny_da_cfg, make_tile):
    state = init_state(tiny_da_cfg)
    for _ in range(3):
        state, _ = train_step(state, make_tile(), make_tile())
    path = save_checkpoint(state, tmp_path / 'ckpt')
    names = sorted(p.name for p in path.iterdir())
    assert names == ['checkpoint.json', 'disc_a.pt', 'disc_b.pt', 'gen_a.pt', 'gen_b.pt',
                     'stats_source.json', 'stats_target.json']

    restored = load_checkpoint(path)
    assert restored.iteration == 3
    assert torch.equal(restored.stats_target.mu_glob, state.stats_target.mu_glob)
    tile = make_tile(labels=True)
    a, b = stylize(state, tile), stylize(restored, tile)
    assert a.equals(b)


def test_missing_sidecar_is_checkpoint_error(tmp_path, tiny_da_cfg):
    path = save_checkpoint(init_state(tiny_da_cfg), tmp_path / 'ckpt')
    (path / 'stats_target.json').unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'nowhere')


def test_stylize_contract(tiny_da_cfg, make_tile):
    state = init_state(tiny_da_cfg)
    tile = make_tile(height=40, width=48, labels=True)
    out = stylize(state, tile)
    assert out.pixels.shape == tile.pixels.shape
    assert out.pixels.dtype == np.float32
    assert np.array_equal(out.labels, tile.labels)


def test_stylize_with_own_stats_is_plain_translation(tiny_da_cfg, make_tile):
    state = init_state(tiny_da_cfg)
    state.gen_a.eval()
    state.gen_b.eval()
    tile = make_tile()
    with torch.no_grad():
        feats = state.gen_a.encode(tile_tensor(tile))
        own = channel_stats(feats.bottleneck)
        plain = state.gen_b.decode(feats.bottleneck, feats.skips)[0].numpy()
    state.stats_target.mu_glob = own.mu[0].double()
    state.stats_target.sigma_glob = own.sigma[0].double()
    assert np.allclose(stylize(state, tile).pixels, plain, atol=1e-5)


def test_train_writes_logs_and_checkpoints(tmp_path, tiny_dataset, tiny_da_cfg):
    data_dir, manifest = tiny_dataset
    out = tmp_path / 'da'
    final = train(manifest, tiny_da_cfg, out, quiet=True)
    assert final.name == 'iteration_20'
    assert (out / 'checkpoints' / 'iteration_10' / 'checkpoint.json').is_file()
    assert DomainAdaptationTrainer.latest_checkpoint(out) == final

    with open(out / 'lr_log.csv', newline='') as f:
        lr_rows = list(csv.DictReader(f))
    assert len(lr_rows) == 20
    for row in lr_rows:
        it = int(row['iter'])
        assert abs(float(row['lr_g']) - lr_linear(tiny_da_cfg.schedule, it)) < 1e-12
        assert abs(float(row['lr_d']) - lr_linear(tiny_da_cfg.disc_schedule, it)) < 1e-12

    state = load_checkpoint(final)
    assert state.stats_source.updates_seen == state.iteration == 20


def test_training_is_deterministic(tmp_path, tiny_dataset, tiny_da_cfg):
    _, manifest = tiny_dataset
    train(manifest, tiny_da_cfg, tmp_path / 'run1', quiet=True)
    train(manifest, tiny_da_cfg, tmp_path / 'run2', quiet=True)
    assert (tmp_path / 'run1' / 'loss_log.csv').read_bytes() == (tmp_path / 'run2' / 'loss_log.csv').read_bytes()


def test_resume_continues_log(tmp_path, tiny_dataset, tiny_da_cfg):
    _, manifest = tiny_dataset
    out = tmp_path / 'da'
    train(manifest, tiny_da_cfg, out, quiet=True)
    train(manifest, tiny_da_cfg, out, resume=out / 'checkpoints' / 'iteration_10', quiet=True)
    with open(out / 'loss_log.csv', newline='') as f:
        iters = [int(r['iter']) for r in csv.DictReader(f)]
    assert iters == list(range(1, 21))


def test_resume_adopts_extended_schedule(tmp_path, tiny_dataset, tiny_da_cfg):
    _, manifest = tiny_dataset
    out = tmp_path / 'da'
    train(manifest, tiny_da_cfg, out, quiet=True)
    longer = replace(tiny_da_cfg, schedule=ScheduleConfig(lr_base=2e-4, iter_max=30, iter_decay_start=25))
    final = train(manifest, longer, out, resume=out / 'checkpoints' / 'iteration_20', quiet=True)
    assert final.name == 'iteration_30'

    with open(out / 'lr_log.csv', newline='') as f:
        rows = [r for r in csv.DictReader(f) if int(r['iter']) > 20]
    assert [int(r['iter']) for r in rows] == list(range(21, 31))
    for row in rows:
        assert abs(float(row['lr_g']) - lr_linear(longer.schedule, int(row['iter']))) < 1e-12
    assert load_checkpoint(final).cfg.schedule == longer.schedule


def test_resume_rejects_different_networks(tmp_path, tiny_dataset, tiny_da_cfg):
    _, manifest = tiny_dataset
    out = tmp_path / 'da'
    train(manifest, tiny_da_cfg, out, quiet=True)
    deeper = replace(tiny_da_cfg, generator=replace(tiny_da_cfg.generator, residual_blocks=2))
    with pytest.raises(ConfigError, match='generator'):
        train(manifest, deeper, out, resume=out / 'checkpoints' / 'iteration_10', quiet=True)


def test_train_requires_both_domains(tmp_path, tiny_dataset, tiny_da_cfg):
    _, manifest = tiny_dataset
    with pytest.raises(ConfigError):
        train(manifest.select(domain='source'), tiny_da_cfg, tmp_path / 'da', quiet=True)


def test_stylize_manifest_mirrors_sources(tmp_path, tiny_dataset, tiny_da_cfg):
    _, manifest = tiny_dataset
    state = init_state(tiny_da_cfg)
    out = tmp_path / 'stylized'
    stylized = stylize_manifest(state, manifest, out, quiet=True)
    sources = manifest.select(domain='source').entries
    assert len(stylized) == len(sources)
    for src, sty in zip(sources, stylized.entries):
        assert sty.path.name == src.path.name
        assert sty.label_path.read_bytes() == src.label_path.read_bytes()
        assert sty.load().dtype == np.uint8
    assert Manifest.load(out / 'manifest.csv').entries[0].path.name == sources[0].path.name
    assert read_histogram_csv(out / 'histogram.csv').sum() == 4 * 64 * 64 * len(sources)


def test_config_validation(tiny_da_cfg):
    with pytest.raises(ConfigError):
        replace(tiny_da_cfg, decay_rate=1.0).validate()
    with pytest.raises(ConfigError):
        replace(tiny_da_cfg, checkpoint_every=0).validate()
    assert isinstance(DATrainConfig().betas, tuple)


def test_total_generator_loss_gradients_match_finite_differences(tiny_da_cfg, gradient_check):
    state = init_state(tiny_da_cfg)
    for net in state.networks.values():
        net.double().eval()
    gen = torch.Generator().manual_seed(5)
    # the discriminator needs at least 32x32
    x_s = torch.rand(1, 4, 32, 32, dtype=torch.float64, generator=gen) * 2 - 1
    x_t = torch.rand(1, 4, 32, 32, dtype=torch.float64, generator=gen) * 2 - 1

    def objective():
        fwd = forward_generators(state, x_s, x_t)
        return weighted_total(generator_loss_terms(state, fwd, x_s, x_t), tiny_da_cfg.loss_weights)

    params = list(state.gen_a.parameters()) + list(state.gen_b.parameters())
    checked, sampled, mismatches = gradient_check(objective, params)
    assert checked >= sampled // 2
    assert mismatches == []
