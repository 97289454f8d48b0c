// DOM wiring: a paged example gallery on the left, one editing session on
// the right. All rendering goes through textContent; corpus tokens never
// touch innerHTML.

import { ApiClient, ExampleSummary, RequestRejected, ServiceDown } from "./api.js";
import { applyChipTarget, degenderChips, moveChip, pageCount, removeChip, sanitizeTyped } from "./chips.js";
import { SessionState, appendRegeneration, newSession, replayMatches, withEdited } from "./state.js";

export const PAGE_SIZE = 10;

interface GalleryState {
  split: string;
  page: number;
  items: ExampleSummary[];
  hasNext: boolean;
  /** total example count, known once a short page has been seen */
  knownTotal: number | null;
}

export class App {
  session: SessionState | null = null;
  gallery: GalleryState = { split: "val", page: 0, items: [], hasNext: false, knownTotal: null };
  /** ✓/✗ per history index after the last replay, null before any replay */
  replayResults: boolean[] | null = null;

  private readonly api: ApiClient;
  private readonly root: HTMLElement;
  private queue: string[][] = [];
  private inflight = false;
  private idleWaiters: (() => void)[] = [];
  private fieldErrors: { field: string; message: string }[] = [];
  private banner: string | null = null;

  constructor(root: HTMLElement, api: ApiClient) {
    this.root = root;
    this.api = api;
    this.renderShell();
  }

  // ── lifecycle ────────────────────────────────────────────────────────────

  async start(): Promise<void> {
    await this.loadPage(this.gallery.split, 0);
  }

  /** Resolves once no regenerate request is running or queued. */
  whenIdle(): Promise<void> {
    if (!this.inflight && this.queue.length === 0) return Promise.resolve();
    return new Promise((resolve) => this.idleWaiters.push(resolve));
  }

  // ── gallery ──────────────────────────────────────────────────────────────

  async loadPage(split: string, page: number): Promise<void> {
    try {
      // fetch one extra row purely to learn whether a next page exists
      const rows = await this.api.examples(split, page * PAGE_SIZE, PAGE_SIZE + 1);
      const items = rows.slice(0, PAGE_SIZE);
      const hasNext = rows.length > PAGE_SIZE;
      const knownTotal = hasNext ? this.gallery.knownTotal : page * PAGE_SIZE + items.length;
      this.gallery = { split, page, items, hasNext, knownTotal };
      this.banner = null;
    } catch (err) {
      this.banner = err instanceof ServiceDown ? err.message : String(err);
    }
    this.render();
  }

  async select(imageId: string): Promise<void> {
    try {
      const pred = await this.api.predict(imageId);
      this.session = newSession(pred);
      this.replayResults = null;
      this.fieldErrors = [];
      this.banner = null;
    } catch (err) {
      this.banner = String(err);
    }
    this.render();
  }

  // ── chip editing ─────────────────────────────────────────────────────────

  private edit(edited: string[]): void {
    if (!this.session) return;
    this.session = withEdited(this.session, edited);
    this.render();
  }

  addTypedChip(raw: string): void {
    const token = sanitizeTyped(raw);
    if (!this.session || token === null) return;
    this.edit([...this.session.edited, token]);
  }

  degender(): void {
    if (this.session) this.edit(degenderChips(this.session.edited));
  }

  setChipTarget(target: number): void {
    if (this.session) this.edit(applyChipTarget(this.session.edited, target));
  }

  // ── regeneration (one in flight, later clicks queue) ─────────────────────

  regenerate(): void {
    if (!this.session) return;
    this.queue.push(this.session.edited.slice());
    this.pump();
  }

  private pump(): void {
    if (this.inflight) return;
    const skeleton = this.queue.shift();
    if (skeleton === undefined) {
      for (const resolve of this.idleWaiters.splice(0)) resolve();
      return;
    }
    const session = this.session;
    if (!session) {
      this.pump();
      return;
    }
    this.inflight = true;
    this.api
      .regenerate(session.imageId, skeleton)
      .then((res) => {
        if (this.session && this.session.imageId === res.image_id) {
          this.session = appendRegeneration(this.session, res.skeleton, res.caption);
          this.fieldErrors = [];
        }
      })
      .catch((err) => {
        if (err instanceof RequestRejected) {
          this.fieldErrors = err.errors;
        } else {
          this.banner = String(err);
        }
      })
      .finally(() => {
        this.inflight = false;
        this.render();
        this.pump();
      });
    this.render();
  }

  /** Re-run every history entry and mark whether the service reproduced it. */
  async replayHistory(): Promise<void> {
    if (!this.session) return;
    const session = this.session;
    const results: boolean[] = [];
    for (const entry of session.history) {
      const res = await this.api.regenerate(session.imageId, entry.skeleton.slice());
      results.push(replayMatches(entry, res.caption));
    }
    this.replayResults = results;
    this.render();
  }

  // ── rendering ────────────────────────────────────────────────────────────

  private renderShell(): void {
    this.root.textContent = "";
    const banner = el("div", "banner");
    banner.hidden = true;
    const layout = el("div", "layout");
    layout.append(el("section", "gallery"), el("section", "session"));
    this.root.append(banner, layout);
  }

  render(): void {
    this.renderBanner();
    this.renderGallery();
    this.renderSession();
  }

  private renderBanner(): void {
    const banner = this.root.querySelector<HTMLElement>(".banner")!;
    banner.textContent = "";
    banner.hidden = this.banner === null;
    if (this.banner === null) return;
    banner.append(span("banner-text", this.banner));
    banner.append(
      button("retry", "retry", () => void this.loadPage(this.gallery.split, this.gallery.page)),
    );
  }

  private renderGallery(): void {
    const pane = this.root.querySelector<HTMLElement>(".gallery")!;
    pane.textContent = "";
    const g = this.gallery;

    const controls = el("div", "pager");
    for (const split of ["train", "val", "test"]) {
      const b = button(`split-${split}`, split, () => void this.loadPage(split, 0));
      if (split === g.split) b.classList.add("active");
      controls.append(b);
    }
    const prev = button("prev", "prev", () => void this.loadPage(g.split, g.page - 1));
    prev.disabled = g.page === 0;
    const next = button("next", "next", () => void this.loadPage(g.split, g.page + 1));
    next.disabled = !g.hasNext;
    const label =
      g.knownTotal !== null
        ? `page ${g.page + 1} of ${pageCount(g.knownTotal, PAGE_SIZE)}`
        : `page ${g.page + 1}`;
    controls.append(prev, span("page-label", label), next);
    pane.append(controls);

    if (g.items.length === 0) {
      pane.append(el("p", "empty-state", "no examples in this split"));
      return;
    }
    for (const ex of g.items) {
      const card = el("article", "card");
      card.append(el("h3", "card-id", ex.image_id));
      const chips = el("div", "concepts");
      for (const c of ex.concepts) chips.append(span("concept-chip", c));
      card.append(chips);
      card.append(el("p", "clean", ex.clean));
      card.append(el("p", "noisy", ex.noisy));
      card.append(button("open", "open", () => void this.select(ex.image_id)));
      pane.append(card);
    }
  }

  private renderSession(): void {
    const pane = this.root.querySelector<HTMLElement>(".session")!;
    pane.textContent = "";
    const s = this.session;
    if (!s) {
      pane.append(el("p", "empty-state", "select an example to start editing"));
      return;
    }

    pane.append(el("h2", "session-id", s.imageId));

    const compare = el("div", "compare");
    const baselineCol = el("div", "baseline-col");
    baselineCol.append(el("h4", "", "end-to-end baseline"));
    baselineCol.append(el("p", "baseline-caption", s.baseline ? s.baseline.join(" ") : "(no baseline checkpoint)"));
    const skelCol = el("div", "skeleton-col");
    skelCol.append(el("h4", "", "skeleton-conditioned"));
    const latest = s.history.length ? s.history[s.history.length - 1]!.caption : s.initialCaption;
    const latestP = el("p", "latest-caption", latest.join(" "));
    skelCol.append(latestP);
    const lastSkeleton = s.history.length ? s.history[s.history.length - 1]!.skeleton : s.predicted;
    if (lastSkeleton.length === 0) skelCol.append(span("badge", "unconditioned"));
    compare.append(baselineCol, skelCol);
    pane.append(compare);

    const editor = el("div", "editor");
    const chipRow = el("div", "chips");
    s.edited.forEach((tok, i) => {
      const chip = span("chip", tok);
      chip.draggable = true;
      chip.append(button("chip-left", "◂", () => this.edit(moveChip(this.session!.edited, i, i - 1))));
      chip.append(button("chip-right", "▸", () => this.edit(moveChip(this.session!.edited, i, i + 1))));
      chip.append(button("chip-remove", "×", () => this.edit(removeChip(this.session!.edited, i))));
      chipRow.append(chip);
    });
    editor.append(chipRow);

    const addInput = el("input", "add-input") as HTMLInputElement;
    addInput.placeholder = "add chip";
    const addBtn = button("add-chip", "add", () => {
      this.addTypedChip(addInput.value);
      addInput.value = "";
    });
    const target = el("input", "chip-target") as HTMLInputElement;
    target.type = "number";
    target.value = String(s.edited.length);
    const targetBtn = button("apply-target", "trim to target", () =>
      this.setChipTarget(Number(target.value)),
    );
    editor.append(
      addInput,
      addBtn,
      button("degender", "degender", () => this.degender()),
      target,
      targetBtn,
      button("regenerate", "regenerate", () => this.regenerate()),
    );
    if (this.inflight || this.queue.length) {
      editor.append(span("pending", this.inflight ? "generating…" : ""));
    }
    const errors = el("ul", "field-errors");
    for (const e of this.fieldErrors) errors.append(el("li", "field-error", `${e.field}: ${e.message}`));
    editor.append(errors);
    pane.append(editor);

    const historyBox = el("div", "history");
    historyBox.append(el("h4", "", `history (${s.history.length})`));
    const list = el("ol", "history-list");
    s.history.forEach((entry, i) => {
      const item = el("li", "history-entry");
      item.append(span("history-skeleton", entry.skeleton.join(" ")));
      item.append(span("history-caption", entry.caption.join(" ")));
      if (this.replayResults && i < this.replayResults.length) {
        item.append(span("replay-mark", this.replayResults[i] ? "✓" : "✗"));
      }
      list.append(item);
    });
    historyBox.append(list);
    historyBox.append(button("replay", "replay history", () => void this.replayHistory()));
    pane.append(historyBox);
  }
}

// ── tiny DOM helpers ─────────────────────────────────────────────────────────

function el(tag: string, cls: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function span(cls: string, text: string): HTMLElement {
  return el("span", cls, text);
}

function button(cls: string, text: string, onClick: () => void): HTMLButtonElement {
  const b = el("button", cls, text) as HTMLButtonElement;
  b.type = "button";
  b.addEventListener("click", onClick);
  return b;
}

export function createApp(root: HTMLElement, api: ApiClient): App {
  return new App(root, api);
}
