import json

import numpy as np
import pytest

from capedit.editor import EditConfig, EditRequest, Editor
from capedit.errors import CacheMissError, ContractError, InputFormatError

from conftest import make_adapters, synth_image

FAST = dict(steps_invert=10, steps_generate=10)


def make_editor(tmp_path, name="runs", **adapter_kwargs):
    return Editor(make_adapters(**adapter_kwargs), runs_dir=tmp_path / name)


def save_image(tmp_path, seed=0, size=64):
    path = tmp_path / f"input-{seed}.png"
    synth_image(size, size, seed=seed).save(path)
    return path


class TestEdit:
    def test_edit_writes_image_and_manifest(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                         config=EditConfig(**FAST)))
        assert result.output_path.exists()
        assert result.manifest_path.exists()
        assert result.output_image.size == (64, 64)
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["manifest_id"] == result.manifest_id

    def test_deterministic_byte_identical(self, tmp_path):
        path = save_image(tmp_path)
        cfg = EditConfig(seed=7, **FAST)
        res_a = make_editor(tmp_path, "a").edit(
            EditRequest(image=path, instruction="add a hat", config=cfg))
        res_b = make_editor(tmp_path, "b").edit(
            EditRequest(image=path, instruction="add a hat", config=cfg))
        assert res_a.output_path.read_bytes() == res_b.output_path.read_bytes()

    def test_output_dims_equal_input_dims(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path, size=96)
        result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                         config=EditConfig(**FAST)))
        assert result.output_image.size == (96, 96)

    def test_nonmultiple_dims_center_cropped(self, tmp_path):
        editor = make_editor(tmp_path)
        path = tmp_path / "odd.png"
        synth_image(67, 70, seed=5).save(path)
        result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                         config=EditConfig(**FAST)))
        assert result.output_image.size == (64, 64)
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["image"]["original_size"] == [67, 70]

    def test_weight_affects_output(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        outs = {}
        for w in (0.75, 1.0, 1.25):
            cfg = EditConfig(weight=w, **FAST)
            result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                             config=cfg))
            outs[w] = result.output_path.read_bytes()
        assert len(set(outs.values())) == 3

    def test_manifest_records_reproduction_inputs(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                         config=EditConfig(seed=3, **FAST)))
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["model_ids"]["diffusion"].startswith("mock-diffusion")
        assert manifest["template"] == "simplified"
        assert manifest["config"]["seed"] == 3
        assert manifest["config"]["steps_invert"] == 10
        assert manifest["direction"]["weight"] == 1.0
        assert manifest["inversion"]["trajectory_checksum"]
        assert manifest["output"]["sha256"]
        assert manifest["captions"]["inversion"]

    def test_inversion_cache_hit_on_second_edit(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        first = editor.edit(EditRequest(image=path, instruction="add a hat",
                                        config=EditConfig(**FAST)))
        second = editor.edit(EditRequest(image=path, instruction="add a scarf",
                                         config=EditConfig(**FAST)))
        m1 = json.loads(first.manifest_path.read_text())
        m2 = json.loads(second.manifest_path.read_text())
        assert m1["inversion"]["cache_hit"] is False
        assert m2["inversion"]["cache_hit"] is True
        assert m1["inversion"]["cache_key"] == m2["inversion"]["cache_key"]
        assert editor.cache_stats()["hits"] == 1

    def test_undecodable_image_fails_with_failure_manifest(self, tmp_path):
        editor = make_editor(tmp_path)
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"this is not a png")
        with pytest.raises(InputFormatError) as err:
            editor.edit(EditRequest(image=bad, instruction="add a hat",
                                    config=EditConfig(**FAST)))
        assert "bad.png" in str(err.value)
        failures = [json.loads(p.read_text()) for p in editor.manifests_dir.glob("*.json")]
        assert any(m.get("kind") == "failure" for m in failures)

    def test_instruction_only_mode_skips_llm(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        cfg = EditConfig(conditioning_mode="instruction_only", **FAST)
        result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                         config=cfg))
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["calls"]["generator"]["generate_text"] == 0
        assert result.caption_pair.after == ("add a hat",)
        assert result.direction_norm == 0.0

    def test_conditioning_modes_differ(self, tmp_path):
        # At w=1 with a single captioner caption, full-mode conditioning
        # algebraically equals after-caption-only (base + (after-before) with
        # base == before); w=1.25 keeps the three modes distinguishable.
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        outputs = {}
        for mode in ("full", "instruction_only", "after_caption_only"):
            cfg = EditConfig(conditioning_mode=mode, weight=1.25, **FAST)
            result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                             config=cfg))
            outputs[mode] = result.output_path.read_bytes()
        assert len(set(outputs.values())) == 3

    def test_caption_overrides_flow_through(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        cfg = EditConfig(before_caption_override="a pinned before",
                         after_caption_override="a pinned after", **FAST)
        result = editor.edit(EditRequest(image=path, instruction="add a hat",
                                         config=cfg))
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["captions"]["inversion"] == "a pinned before"
        assert manifest["captions"]["after"] == ["a pinned after"]
        assert manifest["calls"]["generator"]["generate_text"] == 0
        assert manifest["calls"]["captioner"]["caption_image"] == 0


class TestRerun:
    def test_rerun_zero_llm_and_captioner_calls(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        base = editor.edit(EditRequest(image=path, instruction="add a hat",
                                       config=EditConfig(**FAST)))
        gen_before = editor.adapters.generator.calls.generate_text
        cap_before = editor.adapters.captioner.calls.caption_image
        emb_before = editor.adapters.embedder.calls.embed_text
        rerun = editor.rerun_with_weight(base.manifest_id, 1.25)
        assert editor.adapters.generator.calls.generate_text == gen_before
        assert editor.adapters.captioner.calls.caption_image == cap_before
        assert editor.adapters.embedder.calls.embed_text == emb_before
        manifest = json.loads(rerun.manifest_path.read_text())
        assert manifest["calls"]["generator"]["generate_text"] == 0
        assert manifest["calls"]["captioner"]["caption_image"] == 0

    def test_rerun_equals_cold_edit_bitwise(self, tmp_path):
        path = save_image(tmp_path)
        warm = make_editor(tmp_path, "warm")
        base = warm.edit(EditRequest(image=path, instruction="add a hat",
                                     config=EditConfig(weight=1.0, **FAST)))
        rerun = warm.rerun_with_weight(base.manifest_id, 1.25)

        cold = make_editor(tmp_path, "cold")
        cold_res = cold.edit(EditRequest(image=path, instruction="add a hat",
                                         config=EditConfig(weight=1.25, **FAST)))
        assert rerun.output_path.read_bytes() == cold_res.output_path.read_bytes()

    def test_rerun_same_weight_identical_output(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        base = editor.edit(EditRequest(image=path, instruction="add a hat",
                                       config=EditConfig(weight=1.0, **FAST)))
        rerun = editor.rerun_with_weight(base.manifest_id, 1.0)
        assert rerun.output_path.read_bytes() == base.output_path.read_bytes()

    def test_weight_sweep_three_distinct_outputs_one_inversion(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        base = editor.edit(EditRequest(image=path, instruction="add a hat",
                                       config=EditConfig(weight=1.0, **FAST)))
        blobs = {w: editor.rerun_with_weight(base.manifest_id, w).output_path.read_bytes()
                 for w in (0.75, 1.0, 1.25)}
        assert len(set(blobs.values())) == 3
        assert editor.cache_stats()["inversions"] == 1

    def test_rerun_of_rerun_resolves_parent(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        base = editor.edit(EditRequest(image=path, instruction="add a hat",
                                       config=EditConfig(**FAST)))
        first = editor.rerun_with_weight(base.manifest_id, 0.75)
        second = editor.rerun_with_weight(first.manifest_id, 1.25)
        manifest = json.loads(second.manifest_path.read_text())
        assert manifest["parent_manifest"] == base.manifest_id

    def test_missing_cache_raises_cache_miss(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        base = editor.edit(EditRequest(image=path, instruction="add a hat",
                                       config=EditConfig(**FAST)))
        for cached in editor.cache_dir.glob("*.npz"):
            cached.unlink()
        with pytest.raises(CacheMissError) as err:
            editor.rerun_with_weight(base.manifest_id, 1.25)
        assert "full edit" in str(err.value)

    def test_unknown_manifest_raises(self, tmp_path):
        editor = make_editor(tmp_path)
        with pytest.raises(CacheMissError):
            editor.rerun_with_weight("deadbeef", 1.0)

    def test_ablation_manifest_rejected_for_rerun(self, tmp_path):
        editor = make_editor(tmp_path)
        path = save_image(tmp_path)
        cfg = EditConfig(conditioning_mode="instruction_only", **FAST)
        base = editor.edit(EditRequest(image=path, instruction="add a hat", config=cfg))
        with pytest.raises(ContractError):
            editor.rerun_with_weight(base.manifest_id, 1.25)


class TestValidation:
    def test_empty_instruction_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            EditRequest(image=save_image(tmp_path), instruction="  ")

    def test_bad_config_rejected(self):
        with pytest.raises(ContractError):
            EditConfig(steps_invert=0)
        with pytest.raises(ContractError):
            EditConfig(conditioning_mode="bogus")
        with pytest.raises(ContractError):
            EditConfig(weight=-1.0)
