/** DOM wiring for the review console. Rendering only; all decisions
 * live in queueModel / statsModel so they stay testable without a
 * browser. */

import { ApiClient } from "./api.js";
import { actionForKey, QueueModel, validateEdit } from "./queueModel.js";
import { actionBars, errorBars, reviewRateGauge } from "./statsModel.js";
import type { AnnotationRecord, QueueFilters, ReviewAction } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

function routeReason(record: AnnotationRecord): string {
  switch (record.route) {
    case "cold_start_review":
      return "cold start: full expert review";
    case "escalate":
      return "confident but disagrees with oracle";
    case "adopt_oracle":
      return "uncertain: oracle adopted";
    case "adopt_self":
      return "confident and consistent";
  }
}

function fmt(x: number | null): string {
  return x === null ? "—" : x.toFixed(3);
}

export class App {
  private model: QueueModel;
  private focusedId: string | null = null;
  private filters: QueueFilters = {};

  constructor(
    private readonly root: HTMLElement,
    api: ApiClient,
    reviewer: string,
  ) {
    this.model = new QueueModel(api, reviewer);
    this.api = api;
  }

  private api: ApiClient;

  async start(): Promise<void> {
    this.root.innerHTML = "";
    this.root.append(this.banner(), this.toolbar(), this.statsPanel(), this.queuePanel());
    document.addEventListener("keydown", (ev) => this.onKey(ev));
    await this.refresh();
  }

  private bannerNode = el("div", "banner hidden");
  private statsNode = el("section", "stats");
  private queueNode = el("section", "queue");

  private banner(): HTMLElement {
    return this.bannerNode;
  }

  private showBanner(message: string, retry: boolean): void {
    this.bannerNode.innerHTML = "";
    this.bannerNode.classList.remove("hidden");
    this.bannerNode.append(el("span", "", message));
    if (retry) {
      const btn = el("button", "", "retry");
      btn.addEventListener("click", () => void this.refresh());
      this.bannerNode.append(btn);
    }
  }

  private hideBanner(): void {
    this.bannerNode.classList.add("hidden");
  }

  private toolbar(): HTMLElement {
    const bar = el("div", "toolbar");
    const modality = el("select");
    modality.append(new Option("all modalities", ""));
    for (const m of ["MRI", "CT", "endoscopy", "fundus", "histopathology"]) {
      modality.append(new Option(m, m));
    }
    modality.addEventListener("change", () => {
      this.filters.modality = modality.value || undefined;
      void this.refresh();
    });
    const refresh = el("button", "", "refresh queue");
    refresh.addEventListener("click", () => void this.refresh());
    bar.append(modality, refresh, el("span", "hint", "shortcuts: A accept · E edit · R reject"));
    return bar;
  }

  private statsPanel(): HTMLElement {
    return this.statsNode;
  }

  private queuePanel(): HTMLElement {
    return this.queueNode;
  }

  async refresh(): Promise<void> {
    try {
      await this.model.load(this.filters);
      await this.model.retryOffline();
      this.hideBanner();
    } catch {
      this.showBanner("service unreachable — nothing was lost, retry when it is back", true);
      return;
    }
    this.renderQueue();
    void this.renderStats();
  }

  private renderQueue(): void {
    this.queueNode.innerHTML = "";
    if (this.model.cards.length === 0) {
      const empty = el("div", "empty");
      empty.append(
        el("h2", "", "queue drained"),
        el("p", "", "no records awaiting review — resume the loop to continue the iteration"),
      );
      this.queueNode.append(empty);
      return;
    }
    for (const card of this.model.cards) {
      this.queueNode.append(this.renderCard(card.record, card.status, card.note));
    }
  }

  private renderCard(record: AnnotationRecord, status: string, note: string): HTMLElement {
    const box = el("article", "card");
    box.dataset.recordId = record.record_id;
    box.tabIndex = 0;
    box.addEventListener("focus", () => (this.focusedId = record.record_id));

    const head = el("header");
    head.append(
      el("strong", "", record.record_id),
      el("span", "badge", record.modality),
      el("span", "badge", `H ${fmt(record.h_traj)}`),
      el("span", "badge", `δ ${fmt(record.delta_ann)}`),
      el("span", "badge route", routeReason(record)),
    );

    const image = el("div", "image");
    if (/^https?:/.test(record.image_ref)) {
      const img = el("img");
      img.src = record.image_ref;
      img.alt = record.sample_id;
      image.append(img);
    } else {
      image.append(el("div", "placeholder", record.image_ref));
    }

    const question = el("p", "question", record.question.text);
    const panes = el("div", "panes");
    const self = el("div", "pane");
    self.append(el("h4", "", "model"), el("p", "", record.y_self?.text ?? "(none)"));
    const oracle = el("div", "pane");
    oracle.append(el("h4", "", "oracle"), el("p", "", record.y_oracle?.text ?? "(none)"));
    panes.append(self, oracle);

    const controls = el("div", "controls");
    const editArea = el("textarea");
    editArea.placeholder = "edited annotation…";
    const submit = (action: ReviewAction) => void this.submit(record.record_id, action, editArea.value);
    for (const [label, action] of [
      ["accept", "accept"],
      ["edit", "edit"],
      ["reject", "reject"],
    ] as const) {
      const btn = el("button", `act-${action}`, label);
      btn.addEventListener("click", () => submit(action));
      if (status !== "pending") btn.disabled = true;
      controls.append(btn);
    }
    controls.append(editArea);
    if (note) controls.append(el("p", "note", note));

    box.append(head, image, question, panes, controls);
    return box;
  }

  private async submit(recordId: string, action: ReviewAction, editedText: string): Promise<void> {
    if (action === "edit") {
      const problem = validateEdit(editedText);
      if (problem) {
        const card = this.model.card(recordId);
        if (card) card.note = problem;
        this.renderQueue();
        return;
      }
    }
    const outcome = await this.model.submit(recordId, action, action === "edit" ? editedText : undefined);
    if (outcome.kind === "offline") {
      this.showBanner("service unreachable — action queued locally", true);
    }
    this.renderQueue();
    void this.renderStats();
  }

  private onKey(ev: KeyboardEvent): void {
    if (ev.target instanceof HTMLTextAreaElement || ev.target instanceof HTMLInputElement) return;
    const action = actionForKey(ev.key);
    if (!action) return;
    const id = this.focusedId ?? this.model.cards[0]?.record.record_id;
    if (!id) return;
    const card = this.root.querySelector<HTMLElement>(`[data-record-id="${id}"]`);
    const editArea = card?.querySelector("textarea");
    void this.submit(id, action, editArea?.value ?? "");
  }

  private async renderStats(): Promise<void> {
    this.statsNode.innerHTML = "";
    try {
      const stats = await this.api.stats();
      const gauge = reviewRateGauge(stats);
      const summary = el("div", "summary");
      summary.append(
        el("span", "", `records: ${stats.total}`),
        el("span", "", `pending: ${stats.pending}`),
        el("span", "gauge", `review rate ${gauge.label}`),
      );
      const bars = el("div", "bars");
      for (const bar of actionBars(stats)) {
        const wrap = el("div", "bar");
        const fill = el("div", "fill");
        fill.style.height = `${Math.round(bar.proportion * 100)}%`;
        wrap.append(fill, el("label", "", `${bar.label} ${(bar.value * 100).toFixed(0)}%`));
        bars.append(wrap);
      }
      this.statsNode.append(summary, bars);
      const dist = await this.api.errorDistribution().catch(() => null);
      if (dist) {
        const errWrap = el("div", "bars errors");
        for (const bar of errorBars(dist)) {
          const wrap = el("div", "bar");
          const fill = el("div", "fill err");
          fill.style.height = `${Math.round(bar.proportion * 100)}%`;
          wrap.append(fill, el("label", "", `${bar.label} ${bar.value.toFixed(2)}`));
          errWrap.append(wrap);
        }
        this.statsNode.append(el("h3", "", `error distribution (iteration ${dist.iteration})`), errWrap);
      }
      const protos = await this.api.prototypes().catch(() => null);
      if (protos) {
        const list = el("ul", "protos");
        for (const p of protos.prototypes) {
          list.append(el("li", "", `${p.prototype_id}: ${p.member_count} members, dims [${p.dominant_capabilities.join(", ")}]`));
        }
        this.statsNode.append(el("h3", "", "failure prototypes"), list);
      }
    } catch {
      this.statsNode.append(el("p", "note", "stats unavailable"));
    }
  }
}
