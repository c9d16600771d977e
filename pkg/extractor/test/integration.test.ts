/**
 * Cross-component contract: extractor output must pass the consumer's
 * bundle validation and flow end to end through its fit/score CLI, with
 * MSP and KNN producing finite scores for every sample.
 */

import { spawnSync } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { runExtraction, SplitResult } from "../src/extract";
import { writeToyPng } from "./extract.test";

const CLI = "oodnoise";
let tmp: string;
let toy: SplitResult;

function run(args: string[]): { status: number | null; stdout: string; stderr: string } {
  const proc = spawnSync(CLI, args, { encoding: "utf-8", timeout: 120_000 });
  return { status: proc.status, stdout: proc.stdout ?? "", stderr: proc.stderr ?? "" };
}

function cliAvailable(): boolean {
  return spawnSync(CLI, ["--help"], { encoding: "utf-8" }).status === 0;
}

beforeAll(() => {
  tmp = fs.mkdtempSync(path.join(os.tmpdir(), "integration-"));
  const imgDir = path.join(tmp, "imgs");
  for (let i = 0; i < 6; i++) {
    writeToyPng(path.join(imgDir, "a", `x${i}.png`), 26 + i, i + 1);
  }
  for (let i = 0; i < 4; i++) {
    writeToyPng(path.join(imgDir, "b", `y${i}.png`), 30, 50 + i);
  }
  [toy] = runExtraction({
    backbone: "patchproj-64",
    splits: [{ name: "toy", dir: imgDir }],
    outDir: path.join(tmp, "bundles"),
    batchSize: 4,
  });
});

afterAll(() => {
  if (tmp) fs.rmSync(tmp, { recursive: true, force: true });
});

describe("consumer round trip", () => {
  it.skipIf(!cliAvailable())("bundle passes consumer-side validation", () => {
    const probe = spawnSync(
      "python3",
      ["-c",
       "import sys; from oodnoise import tensorio; " +
       "b = tensorio.read_bundle(sys.argv[1]); b.validate(); " +
       "print(b.num_samples, b.features.shape[1], b.num_classes)",
       toy.outDir],
      { encoding: "utf-8" },
    );
    expect(probe.status, probe.stderr).toBe(0);
    expect(probe.stdout.trim()).toBe("10 64 10");
  });

  it.skipIf(!cliAvailable())("msp and knn score every sample finitely", () => {
    for (const detector of ["msp", "knn"]) {
      const stateDir = path.join(tmp, `state-${detector}`);
      const fit = run([
        "fit", "--detector", detector, "--train", toy.outDir,
        "--val", toy.outDir, "--out", stateDir, ...(detector === "knn" ? ["--set", "k=3"] : []),
      ]);
      expect(fit.status, fit.stderr).toBe(0);
      const scorePath = path.join(tmp, `scores-${detector}.csv`);
      const score = run([
        "score", "--state", stateDir, "--bundle", toy.outDir,
        "--out", scorePath,
      ]);
      expect(score.status, score.stderr).toBe(0);
      const lines = fs.readFileSync(scorePath, "utf-8").trim().split("\n");
      expect(lines[0]).toBe("index,score");
      const values = lines.slice(1).map((line) => parseFloat(line.split(",")[1]));
      expect(values).toHaveLength(10);
      expect(values.every(Number.isFinite)).toBe(true);
    }
  });
});
