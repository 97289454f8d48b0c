// Session state and its only legal transitions. History is append-only:
// nothing in the app mutates or replaces past entries, so a session can be
// replayed against the service to surface its purity.

import type { Prediction } from "./api.js";

export interface HistoryEntry {
  readonly skeleton: readonly string[];
  readonly caption: readonly string[];
}

export interface SessionState {
  readonly imageId: string;
  /** skeleton as predicted by stage 1; the chip editor starts from a copy */
  readonly predicted: readonly string[];
  /** current contents of the chip editor */
  readonly edited: string[];
  readonly baseline: readonly string[] | null;
  /** caption produced from the untouched predicted skeleton */
  readonly initialCaption: readonly string[];
  readonly history: readonly HistoryEntry[];
}

export function newSession(pred: Prediction): SessionState {
  return {
    imageId: pred.image_id,
    predicted: Object.freeze(pred.skeleton.slice()),
    edited: pred.skeleton.slice(),
    baseline: pred.baseline_caption ? Object.freeze(pred.baseline_caption.slice()) : null,
    initialCaption: Object.freeze(pred.skeleton_caption.slice()),
    history: [],
  };
}

export function withEdited(state: SessionState, edited: string[]): SessionState {
  return { ...state, edited: edited.slice() };
}

export function appendRegeneration(
  state: SessionState,
  skeleton: string[],
  caption: string[],
): SessionState {
  const entry: HistoryEntry = Object.freeze({
    skeleton: Object.freeze(skeleton.slice()),
    caption: Object.freeze(caption.slice()),
  });
  return { ...state, history: [...state.history, entry] };
}

/** True when a replayed caption list matches its recorded history entry. */
export function replayMatches(entry: HistoryEntry, caption: readonly string[]): boolean {
  return entry.caption.length === caption.length && entry.caption.every((t, i) => t === caption[i]);
}
