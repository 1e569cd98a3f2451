import json

import pytest
import yaml

from fedkei.cli import main

SMALL = {
    "stream": {"n_clients": 2, "n_tasks": 2, "samples_per_class": 12,
               "eval_samples_per_class": 12},
    "finetune_epochs": 2,
    "seeds": [0],
}


def write_config(tmp_path, overrides=None, name="config.yaml"):
    cfg = json.loads(json.dumps(SMALL))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_run_exit_zero_and_outputs(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out),
                 "--variant", "FedKEI"]) == 0
    report = json.loads((out / "report_FedKEI_seed0.json").read_text())
    assert report["variant"] == "FedKEI"
    assert (out / "report_FedKEI_seed0_trace.csv").exists()
    assert (out / "report_FedKEI_seed0_ledger.csv").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(out2)]) == 0
    assert read_tree(out1) == read_tree(out2)


def test_parallel_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, {"clients_parallel": True})
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(out2)]) == 0
    assert read_tree(out1) == read_tree(out2)


def test_config_error_exit_code(tmp_path):
    bad = write_config(tmp_path, {"stream": {"n_clients": 1}})
    assert main(["run", "--config", str(bad), "--out",
                 str(tmp_path / "o")]) == 2
    missing = tmp_path / "nope.yaml"
    assert main(["run", "--config", str(missing)]) == 2
    unknown_key = write_config(tmp_path, {"wat": 1}, name="u.yaml")
    assert main(["run", "--config", str(unknown_key)]) == 2
    unknown_variant = write_config(tmp_path, {"variant": "Best"},
                                   name="v.yaml")
    assert main(["run", "--config", str(unknown_variant)]) == 2


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning",
                            "ignore:invalid value:RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    # an absurd inner-loop learning rate blows up the adapter product
    cfg = write_config(tmp_path, {"bilevel": {"eta1": 1e200}})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--variant", "FedKEI"]) == 3


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    monkeypatch.setenv("FEDKEI_SEED", "7")
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "report_FedKEI_seed7.json").exists()
    assert not (out / "report_FedKEI_seed0.json").exists()


def test_seeds_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out),
                 "--seeds", "1,2"]) == 0
    assert (out / "report_FedKEI_seed1.json").exists()
    assert (out / "report_FedKEI_seed2.json").exists()


def test_k_flag(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out),
                 "--k", "1"]) == 0
    report = json.loads((out / "report_FedKEI_seed0.json").read_text())
    assert report["config"]["k_clusters"] == 1


def test_generate(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = json.loads((out / "dataset" / "manifest.json").read_text())
    assert len(manifest["tasks"]) == 2 * 2 * 2


def test_ablate_table_schema(tmp_path):
    cfg = write_config(tmp_path, {"seeds": [0, 1]})
    out = tmp_path / "out"
    assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    table = json.loads((out / "ablation.json").read_text())["table"]
    assert [row["variant"] for row in table] == [
        "Rand", "FedAvgInit", "A", "B", "C", "FedKEI"]
    for row in table[1:]:
        assert row["lca_incr"] is not None
    for row in table[:-1]:
        assert 0.0 <= row["p_lca_vs_fedkei"] <= 1.0
    assert (out / "ablation.csv").read_text().startswith("variant,")


def test_report_rerender(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    main(["run", "--config", str(cfg), "--out", str(out)])
    rendered = tmp_path / "rendered"
    assert main(["report", str(out / "report_FedKEI_seed0.json"),
                 "--out", str(rendered)]) == 0
    a = (out / "report_FedKEI_seed0_trace.csv").read_bytes()
    b = (rendered / "report_FedKEI_seed0_trace.csv").read_bytes()
    assert a == b
    assert main(["report", str(tmp_path / "absent.json")]) == 2
