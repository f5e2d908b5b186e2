/** Review queue state: ordering, optimistic actions, reconciliation.
 *
 * Submissions update the UI optimistically and reconcile with the
 * server response: 2xx removes the card, 409 refreshes it to the
 * resolved state (another reviewer won), and a network failure parks
 * the action in a local retry queue so nothing is ever dropped.
 */

import { ApiClient, ReviewResult } from "./api.js";
import type { AnnotationRecord, QueueFilters, ReviewAction } from "./types.js";

export type CardStatus = "pending" | "submitting" | "queued_offline";

export interface Card {
  record: AnnotationRecord;
  status: CardStatus;
  note: string;
}

export interface PendingAction {
  recordId: string;
  action: ReviewAction;
  editedText?: string;
}

export interface SubmitOutcome {
  kind: "applied" | "conflict" | "invalid" | "offline";
  detail?: string;
}

/** Server ordering contract: iteration ascending, entropy descending. */
export function sortRecords(records: AnnotationRecord[]): AnnotationRecord[] {
  return [...records].sort((a, b) => {
    if (a.iteration !== b.iteration) return a.iteration - b.iteration;
    const ha = a.h_traj ?? Number.NEGATIVE_INFINITY;
    const hb = b.h_traj ?? Number.NEGATIVE_INFINITY;
    if (ha !== hb) return hb - ha;
    return a.record_id < b.record_id ? -1 : 1;
  });
}

export function actionForKey(key: string): ReviewAction | null {
  switch (key.toLowerCase()) {
    case "a":
      return "accept";
    case "e":
      return "edit";
    case "r":
      return "reject";
    default:
      return null;
  }
}

export function validateEdit(text: string | undefined): string | null {
  if (text === undefined || text.trim() === "") {
    return "edit requires non-empty text";
  }
  return null;
}

export class QueueModel {
  cards: Card[] = [];
  totalPending = 0;
  counts: Record<ReviewAction, number> = { accept: 0, edit: 0, reject: 0 };
  offline: PendingAction[] = [];
  lastError: string | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly reviewer: string,
  ) {}

  async load(filters: QueueFilters = {}, limit = 200): Promise<void> {
    const page = await this.api.queue(filters, 0, limit);
    // trust but verify: render strictly in the documented order
    this.cards = sortRecords(page.records).map((record) => ({ record, status: "pending", note: "" }));
    this.totalPending = page.total_pending;
    this.lastError = null;
  }

  card(recordId: string): Card | undefined {
    return this.cards.find((c) => c.record.record_id === recordId);
  }

  private removeCard(recordId: string): void {
    this.cards = this.cards.filter((c) => c.record.record_id !== recordId);
    this.totalPending = Math.max(0, this.totalPending - 1);
  }

  /** Optimistic submit; resolves to what actually happened. */
  async submit(recordId: string, action: ReviewAction, editedText?: string): Promise<SubmitOutcome> {
    const card = this.card(recordId);
    if (!card) return { kind: "invalid", detail: `no card ${recordId}` };
    if (action === "edit") {
      const problem = validateEdit(editedText);
      if (problem) return { kind: "invalid", detail: problem };
    }
    card.status = "submitting";
    let result: ReviewResult;
    try {
      result = await this.api.review(recordId, action, this.reviewer, editedText);
    } catch {
      // network trouble: keep the action locally, never drop it
      card.status = "queued_offline";
      card.note = "action queued locally, awaiting connection";
      this.offline.push({ recordId, action, editedText });
      return { kind: "offline" };
    }
    if (result.kind === "ok") {
      this.counts[action] += 1;
      this.removeCard(recordId);
      return { kind: "applied" };
    }
    if (result.kind === "conflict") {
      // server is the arbiter: reflect the resolved record and retire the card
      card.record = result.record;
      this.removeCard(recordId);
      return { kind: "conflict", detail: `resolved by ${result.record.review?.reviewer ?? "another reviewer"}` };
    }
    card.status = "pending";
    card.note = result.detail;
    return { kind: "invalid", detail: result.detail };
  }

  /** Flush locally queued actions (in order); stops on the first failure. */
  async retryOffline(): Promise<number> {
    let applied = 0;
    while (this.offline.length > 0) {
      const next = this.offline[0]!;
      let result: ReviewResult;
      try {
        result = await this.api.review(next.recordId, next.action, this.reviewer, next.editedText);
      } catch {
        return applied;
      }
      this.offline.shift();
      if (result.kind === "ok") {
        this.counts[next.action] += 1;
        applied += 1;
      }
      this.removeCard(next.recordId);
    }
    return applied;
  }

  get drained(): boolean {
    return this.cards.length === 0 && this.totalPending === 0;
  }
}
