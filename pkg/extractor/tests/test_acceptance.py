"""Extractor acceptance: emitted files satisfy the harness contract.

The check drives the installed `modalbench` CLI as a black box: validate
must pass with zero errors, the embedding dim must be the benchmark's
1024 default, and a 100-instance extraction must train for 50 steps
without numeric failure.
"""

import json
import subprocess
import sys

import numpy as np
import torch

from mbextract.extract import ExtractorJob, extract_dataset
from mbextract.perceptors import SslT5Perceptor, SslVitPerceptor
from mbextract.raw import read_modality
from mbextract import ssl as ssl_mod

from conftest import TINY_T5, TINY_VIT, write_matrix_modality, write_text_modality


def announce(ok, detail):
    line = "%s criterion 11: %s\n" % ("PASS" if ok else "FAIL", detail)
    sys.__stdout__.write(line)
    sys.__stdout__.flush()
    assert ok, line


def modalbench(*args):
    return subprocess.run([sys.executable, "-m", "modalbench.cli", *args],
                          capture_output=True, text=True)


def test_criterion_11_extractor_contract(tmp_path):
    torch.manual_seed(0)
    n = 100
    labels = write_matrix_modality(tmp_path / "vid.npz", n=n, frames=2,
                                   seed=11)
    write_matrix_modality(tmp_path / "aud.npz", n=n, seed=12)
    archive = np.load(tmp_path / "aud.npz")
    np.savez(tmp_path / "aud.npz", data=archive["data"], labels=labels,
             ids=archive["ids"])
    write_text_modality(tmp_path / "lan.jsonl", labels, seed=13)

    out = tmp_path / "extracted"
    vit_aud = SslVitPerceptor(tiny_config=TINY_VIT)   # benchmark-default 1024
    t5 = SslT5Perceptor(tiny_config=TINY_T5)

    # brief masked-contrastive adaptation before freezing for extraction
    instances, _ = read_modality(str(tmp_path / "aud.npz"), "matrix")
    ssl_mod.train_ssl(vit_aud, instances, steps=5, batch_size=16, seed=1)

    jobs = [
        ExtractorJob(dataset_path=str(tmp_path / "vid.npz"),
                     modality_name="vid", perceptor="ssl-vit",
                     output_dir=str(out), modality_kind="matrix",
                     perceptor_options={"tiny_config": TINY_VIT}),
        ExtractorJob(dataset_path=str(tmp_path / "aud.npz"),
                     modality_name="aud", perceptor="ssl-vit",
                     output_dir=str(out), modality_kind="matrix",
                     perceptor_options={"tiny_config": TINY_VIT}),
        ExtractorJob(dataset_path=str(tmp_path / "lan.jsonl"),
                     modality_name="lan", perceptor="ssl-t5",
                     output_dir=str(out), modality_kind="text",
                     perceptor_options={"tiny_config": TINY_T5}),
    ]
    manifest_path = extract_dataset(
        "extracted-smoke", int(labels.max()) + 1, jobs, str(out),
        perceptors={"aud": vit_aud, "lan": t5})

    validate = modalbench("validate", "--manifest", manifest_path)
    validate_ok = validate.returncode == 0 and "ok name=" in validate.stdout

    with open(manifest_path) as fh:
        manifest = json.load(fh)
    dims_ok = all(m["dim"] == 1024 for m in manifest["modalities"])

    run_path = tmp_path / "train.json"
    train = modalbench("train", "--manifest", manifest_path,
                       "--algorithm", "ERM", "--test-modality", "lan",
                       "--steps", "50", "--seed", "3",
                       "--out", str(run_path))
    train_ok = train.returncode == 0
    status = ""
    if train_ok:
        record = json.loads(run_path.read_text())["record"]
        train_ok = record["status"] == "ok"
        status = record["status"]

    announce(validate_ok and dims_ok and train_ok,
             "validate rc=%d, all dims 1024=%s, 50-step train status=%r"
             % (validate.returncode, dims_ok, status))
