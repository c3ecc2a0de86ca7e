import json

import pytest

from hoicascade.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny synth -> train -> infer -> eval pipeline shared by tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    model = root / "model"
    preds = root / "preds.ndjson"
    report = root / "report.json"
    common = ["--train-scenes", "16", "--test-scenes", "6", "--seed", "3",
              "--phase1-epochs", "2", "--phase2-epochs", "1"]
    assert main(["synth", "--out", str(data)] + common) == 0
    assert main(["train", "--data", str(data), "--out", str(model)] + common) == 0
    assert main(["infer", "--model", str(model), "--data", str(data),
                 "--out", str(preds)] + common) == 0
    assert main(["eval", "--data", str(data), "--preds", str(preds),
                 "--out", str(report)] + common) == 0
    return {"data": data, "model": model, "preds": preds, "report": report,
            "common": common, "root": root}


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        assert (pipeline["data"] / "train.ndjson").exists()
        assert (pipeline["data"] / "meta.json").exists()
        assert (pipeline["model"] / "params.bin").exists()
        assert pipeline["preds"].exists()
        report = json.loads(pipeline["report"].read_text())
        assert "map_rel" in report and "recall_at_k" in report
        assert (pipeline["report"].parent / "report.json.txt").exists()

    def test_eval_on_ground_truth_is_perfect(self, pipeline, tmp_path):
        # feed the ground truth back as predictions: mAP must be exactly 1.0
        from hoicascade.formats import (read_scenes_ndjson, scenes_to_gt_records,
                                        write_predictions_ndjson)
        scenes = read_scenes_ndjson(pipeline["data"] / "test.ndjson")
        records = []
        for scene in scenes:
            entities = [{"box": [e.box.x1, e.box.y1, e.box.x2, e.box.y2],
                         "class_id": e.class_id, "confidence": 1.0}
                        for e in scene.entities]
            triplets = [{"h": t.human, "o": t.object, "verb": t.verb, "score": 0.9}
                        for t in scene.triplets]
            records.append({"image_id": scene.image_id, "entities": entities,
                            "triplets": triplets})
        gt_preds = tmp_path / "gt_preds.ndjson"
        write_predictions_ndjson(gt_preds, records)
        out = tmp_path / "gt_report.json"
        assert main(["eval", "--data", str(pipeline["data"]), "--preds", str(gt_preds),
                     "--out", str(out)] + pipeline["common"]) == 0
        report = json.loads(out.read_text())
        assert report["map_rel"]["value"] == 1.0
        assert report["recall_at_k"]["mean"] == 1.0

    def test_determinism_byte_identical(self, pipeline, tmp_path_factory):
        root2 = tmp_path_factory.mktemp("cli2")
        data2, model2 = root2 / "data", root2 / "model"
        preds2, report2 = root2 / "p.ndjson", root2 / "r.json"
        common = pipeline["common"]
        assert main(["synth", "--out", str(data2)] + common) == 0
        assert main(["train", "--data", str(data2), "--out", str(model2)] + common) == 0
        assert main(["infer", "--model", str(model2), "--data", str(data2),
                     "--out", str(preds2)] + common) == 0
        assert main(["eval", "--data", str(data2), "--preds", str(preds2),
                     "--out", str(report2)] + common) == 0
        assert preds2.read_bytes() == pipeline["preds"].read_bytes()
        assert report2.read_bytes() == pipeline["report"].read_bytes()


class TestErrorPaths:
    def test_usage_error_exit_1(self):
        assert main(["definitely-not-a-command"]) == 1
        assert main(["train"]) == 1  # missing required flags

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "m")]) == 2

    def test_malformed_data_exit_2(self, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        (data / "meta.json").write_text("{}")
        (data / "train.ndjson").write_text("not json\n")
        assert main(["train", "--data", str(data), "--out", str(tmp_path / "m")]) == 2

    def test_bad_config_value_exit_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("train_scenes = not_a_number\n")
        assert main(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 2


class TestChecks:
    def test_oracle_subcommand(self):
        assert main(["oracle", "--instances", "30", "--seed", "2"]) == 0

    def test_gradcheck_small(self):
        assert main(["gradcheck", "--points", "2"]) == 0
