// Pure chip-list operations. Chips are plain lowercase tokens; every token
// the UI sends out came from the predicted skeleton, the user's own typing,
// or the substitution lexicon below -- the UI never invents tokens itself.

/** Mirrors the corpus debiasing map: gendered lemma -> neutral stand-in. */
export const DEGENDER: Record<string, string> = {
  man: "person",
  woman: "person",
  boy: "child",
  girl: "child",
};

// control tokens the decoder owns; typed chips must never collide with them
const RESERVED = new Set(["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"]);

export function isReserved(token: string): boolean {
  return RESERVED.has(token.toLowerCase());
}

/** Normalize a typed chip; null when it is empty, multi-word or reserved. */
export function sanitizeTyped(raw: string): string | null {
  const token = raw.trim().toLowerCase();
  if (!token || /\s/.test(token) || isReserved(token)) return null;
  return token;
}

export function degenderChips(chips: string[]): string[] {
  return chips.map((c) => DEGENDER[c] ?? c);
}

export function removeChip(chips: string[], index: number): string[] {
  return chips.filter((_, i) => i !== index);
}

export function moveChip(chips: string[], from: number, to: number): string[] {
  if (from === to || from < 0 || from >= chips.length) return chips.slice();
  const out = chips.slice();
  const [tok] = out.splice(from, 1);
  out.splice(Math.max(0, Math.min(to, out.length)), 0, tok!);
  return out;
}

/**
 * Length steering: keep the first `target` chips. Generated caption length
 * tracks chip count, so trimming the plan shortens the caption. The target
 * is clamped -- extending past the available chips would mean inventing
 * tokens, which the UI refuses to do.
 */
export function applyChipTarget(chips: string[], target: number): string[] {
  const n = Math.max(0, Math.min(Math.floor(target), chips.length));
  return chips.slice(0, n);
}

/** Pages needed to show `total` examples `pageSize` at a time. */
export function pageCount(total: number, pageSize: number): number {
  if (pageSize <= 0) return 0;
  return Math.ceil(total / pageSize);
}
