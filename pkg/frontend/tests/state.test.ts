import { describe, expect, it } from "vitest";

import type { Prediction } from "../src/api.js";
import { appendRegeneration, newSession, replayMatches, withEdited } from "../src/state.js";

const PRED: Prediction = {
  image_id: "val-000001",
  baseline_caption: ["a", "dog"],
  skeleton: ["dog", "run"],
  skeleton_caption: ["a", "dog", "runs"],
  log_probs: [-0.1, -0.2, -0.3],
};

describe("newSession", () => {
  it("copies the prediction instead of aliasing it", () => {
    const s = newSession(PRED);
    expect(s.edited).toEqual(["dog", "run"]);
    s.edited.push("cat");
    expect(s.predicted).toEqual(["dog", "run"]);
    expect(PRED.skeleton).toEqual(["dog", "run"]);
  });

  it("starts with an empty history", () => {
    expect(newSession(PRED).history).toEqual([]);
  });
});

describe("appendRegeneration", () => {
  it("appends without disturbing earlier entries", () => {
    let s = newSession(PRED);
    s = appendRegeneration(s, ["dog"], ["a", "dog"]);
    const first = s.history[0];
    s = appendRegeneration(s, ["cat"], ["a", "cat"]);
    expect(s.history).toHaveLength(2);
    expect(s.history[0]).toBe(first);
    expect(s.history[1]!.caption).toEqual(["a", "cat"]);
  });

  it("freezes entries so history stays append-only", () => {
    const s = appendRegeneration(newSession(PRED), ["dog"], ["a", "dog"]);
    expect(Object.isFrozen(s.history[0])).toBe(true);
    expect(Object.isFrozen(s.history[0]!.caption)).toBe(true);
  });
});

describe("withEdited", () => {
  it("replaces the editor contents only", () => {
    const s = newSession(PRED);
    const edited = withEdited(s, ["person"]);
    expect(edited.edited).toEqual(["person"]);
    expect(edited.predicted).toEqual(["dog", "run"]);
    expect(edited.history).toBe(s.history);
  });
});

describe("replayMatches", () => {
  it("compares captions token by token", () => {
    const entry = { skeleton: ["dog"], caption: ["a", "dog"] };
    expect(replayMatches(entry, ["a", "dog"])).toBe(true);
    expect(replayMatches(entry, ["a", "cat"])).toBe(false);
    expect(replayMatches(entry, ["a", "dog", "runs"])).toBe(false);
  });
});
