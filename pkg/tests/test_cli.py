import json
import threading
import urllib.request

import numpy as np
import pytest

from find3d import cli, net


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> annotate -> train(1 epoch) pipeline artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(
        [
            "synth", "--out", str(data), "--objects", "4", "--seed", "0",
            "--points", "500", "--pose", "canonical",
        ]
    ) == 0
    manifest = data / "manifest.json"
    labels = root / "labels.jsonl"
    assert cli.main(
        ["annotate", "--manifest", str(manifest), "--out", str(labels), "--views", "4", "--dim", "8"]
    ) == 0
    config = root / "train.json"
    config.write_text(
        json.dumps(
            {
                "manifest": str(manifest),
                "annotations": str(labels),
                "model": {
                    "widths": [8, 8], "heads": [2, 2], "out_dim": 8,
                    "head_hidden": 8, "block_size": 32,
                    "scheme_cycle": ["z", "trans-z", "hilbert", "trans-hilbert"],
                },
                "train": {"batch_objects": 2, "epochs": 1, "seed": 0,
                          "lr_start": 0.001, "lr_end": 0.0005},
            }
        )
    )
    ckpt = root / "model.ckpt"
    assert cli.main(["train", "--config", str(config), "--out", str(ckpt)]) == 0
    return {"root": root, "manifest": manifest, "labels": labels, "config": config, "ckpt": ckpt}


def test_synth_writes_manifest(workspace):
    manifest = json.loads(workspace["manifest"].read_text())
    assert len(manifest["objects"]) == 4
    for entry in manifest["objects"]:
        assert (workspace["manifest"].parent / entry["cloud"]).exists()
        assert (workspace["manifest"].parent / entry["labels"]).exists()


def test_annotate_outputs_jsonl_and_sidecar(workspace):
    lines = [l for l in workspace["labels"].read_text().splitlines() if l.strip()]
    assert len(lines) > 4
    rec = json.loads(lines[0])
    assert set(rec) == {"object_id", "label_text", "point_indices", "embedding_ref"}
    assert (workspace["root"] / "labels.fnde").exists()


def test_train_writes_checkpoint_history_and_best(workspace):
    assert workspace["ckpt"].exists()
    state = net.load_checkpoint(workspace["ckpt"])
    state.validate()
    history = (workspace["root"] / "model.history.csv").read_text().splitlines()
    assert history[0] == "epoch,lr,train_loss,val_loss,skipped_labels"
    assert len(history) == 2
    assert (workspace["root"] / "model.best.ckpt").exists()


def test_train_zero_epochs_equals_initialization(workspace, tmp_path):
    config = json.loads(workspace["config"].read_text())
    config["train"]["epochs"] = 0
    cfg_path = tmp_path / "zero.json"
    cfg_path.write_text(json.dumps(config))
    out = tmp_path / "zero.ckpt"
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    state = net.load_checkpoint(out)
    init = net.init_model(state.config, seed=config.get("init_seed", 0))
    for k in init.params:
        assert np.array_equal(state.params[k], init.params[k])


def test_segment_outputs(workspace, tmp_path):
    cloud = next(workspace["manifest"].parent.glob("*.ply"))
    out = tmp_path / "seg"
    code = cli.main(
        [
            "segment", "--checkpoint", str(workspace["ckpt"]), "--cloud", str(cloud),
            "--query", "body", "--query", "handle", "--out", str(out),
        ]
    )
    assert code == 0
    payload = json.loads((tmp_path / "seg.json").read_text())
    from find3d.plyio import read_ply

    n = len(read_ply(cloud))
    assert len(payload["assignment"]) == n
    assert len(payload["scores"]) == n and len(payload["scores"][0]) == 2
    assert len(payload["max_score"]) == n
    assert (tmp_path / "seg.ply").exists()


def test_segment_missing_cloud_errors(workspace, capsys):
    code = cli.main(
        [
            "segment", "--checkpoint", str(workspace["ckpt"]),
            "--cloud", "/nonexistent/cloud.ply", "--query", "x",
        ]
    )
    assert code == 1
    assert "cloud.ply" in capsys.readouterr().err


def test_segment_requires_query(workspace):
    with pytest.raises(SystemExit):
        cli.main(["segment", "--checkpoint", str(workspace["ckpt"]), "--cloud", "x.ply"])


def test_eval_both_templates_and_reports(workspace, tmp_path):
    for name, template in (("t1", "{part} of a {object}"), ("t2", "{part}")):
        out = tmp_path / name
        code = cli.main(
            [
                "eval", "--checkpoint", str(workspace["ckpt"]),
                "--manifest", str(workspace["manifest"]),
                "--template", template, "--out", str(out),
            ]
        )
        assert code == 0
        report = json.loads((tmp_path / f"{name}.json").read_text())
        assert 0.0 <= report["overall_miou"] <= 1.0
        assert (tmp_path / f"{name}.csv").read_text().startswith("category,object,part,iou")


def test_eval_oracle_predictor_is_perfect(workspace, tmp_path):
    out = tmp_path / "oracle"
    code = cli.main(
        [
            "eval", "--checkpoint", str(workspace["ckpt"]),
            "--manifest", str(workspace["manifest"]),
            "--predictor", "oracle", "--out", str(out),
        ]
    )
    assert code == 0
    assert json.loads((tmp_path / "oracle.json").read_text())["overall_miou"] == 1.0


def test_eval_bad_template_errors(workspace, tmp_path, capsys):
    code = cli.main(
        [
            "eval", "--checkpoint", str(workspace["ckpt"]),
            "--manifest", str(workspace["manifest"]),
            "--template", "{part} of {objekt}", "--out", str(tmp_path / "x"),
        ]
    )
    assert code == 1
    assert "placeholder" in capsys.readouterr().err


def test_describe_reports_counts(capsys):
    assert cli.main(["describe"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["n_parameters"] > 0


def test_annotate_missing_manifest_errors(tmp_path, capsys):
    code = cli.main(["annotate", "--manifest", str(tmp_path / "nope.json"), "--out", "x.jsonl"])
    assert code == 1


# ---------------------------------------------------------------------------
# HTTP service


@pytest.fixture(scope="module")
def server(workspace):
    srv, service = cli.make_server(str(workspace["ckpt"]), str(workspace["manifest"]), port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{srv.server_address[1]}"
    yield base, service
    srv.shutdown()
    srv.server_close()


def get_json(url):
    with urllib.request.urlopen(url, timeout=10) as resp:
        return json.loads(resp.read().decode())


def post(url, payload):
    req = urllib.request.Request(
        url, data=json.dumps(payload).encode(), headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


def test_serve_objects_listing(server, workspace):
    base, _ = server
    listing = get_json(base + "/objects")
    manifest = json.loads(workspace["manifest"].read_text())
    assert [o["id"] for o in listing] == [e["id"] for e in manifest["objects"]]
    assert all(o["n_points"] > 0 and o["category"] for o in listing)


def test_serve_points_endpoint(server):
    base, service = server
    oid = service.order[0]
    payload = get_json(f"{base}/objects/{oid}/points")
    assert len(payload["positions"]) == len(service.objects[oid].cloud)
    assert len(payload["colors"]) == len(payload["positions"])


def test_serve_unknown_object_404(server):
    base, _ = server
    try:
        urllib.request.urlopen(base + "/objects/ghost/points", timeout=10)
        assert False, "expected 404"
    except urllib.error.HTTPError as err:
        assert err.code == 404
        body = json.loads(err.read().decode())
        assert body["error"] and "ghost" in body["detail"]


def test_serve_query_empty_list_400(server):
    base, service = server
    status, body = post(f"{base}/objects/{service.order[0]}/query", {"queries": []})
    assert status == 400
    assert json.loads(body.decode())["error"]


def test_serve_query_deterministic_and_shapes(server):
    base, service = server
    oid = service.order[0]
    url = f"{base}/objects/{oid}/query"
    s1, b1 = post(url, {"queries": ["body", "handle"]})
    s2, b2 = post(url, {"queries": ["body", "handle"]})
    assert s1 == s2 == 200
    assert b1 == b2, "identical posts must return identical bodies"
    payload = json.loads(b1.decode())
    n = len(service.objects[oid].cloud)
    assert len(payload["assignment"]) == n
    assert len(payload["scores"]) == n and len(payload["scores"][0]) == 2


def test_serve_query_matches_cmd_segment(server, workspace, tmp_path):
    base, service = server
    oid = service.order[0]
    manifest = json.loads(workspace["manifest"].read_text())
    entry = next(e for e in manifest["objects"] if e["id"] == oid)
    cloud_path = workspace["manifest"].parent / entry["cloud"]
    out = tmp_path / "par"
    assert cli.main(
        [
            "segment", "--checkpoint", str(workspace["ckpt"]), "--cloud", str(cloud_path),
            "--query", "body", "--query", "handle", "--out", str(out),
        ]
    ) == 0
    _, body = post(f"{base}/objects/{oid}/query", {"queries": ["body", "handle"]})
    assert body == (tmp_path / "par.json").read_bytes()
