/** JSON shapes served by the engine's review API. */

export type Route = "adopt_oracle" | "escalate" | "adopt_self" | "cold_start_review";
export type ReviewAction = "accept" | "edit" | "reject";

export interface AnswerPayload {
  text: string;
  token_logprobs?: number[];
}

export interface ReviewPayload {
  action: ReviewAction;
  reviewer: string;
  edited_text: string | null;
  timestamp: string;
}

export interface AnnotationRecord {
  record_id: string;
  iteration: number;
  sample_id: string;
  image_ref: string;
  modality: string;
  target_dimension: number;
  question: {
    text: string;
    task: "perception" | "description";
    question_type: string;
    choices: string[];
  };
  y_self: AnswerPayload | null;
  y_oracle: { text: string } | null;
  h_traj: number | null;
  delta_ann: number | null;
  route: Route;
  review: ReviewPayload | null;
  final_label: string | null;
  status: "pending" | "resolved" | "rejected";
}

export interface QueueResponse {
  records: AnnotationRecord[];
  next_cursor: number | null;
  total_pending: number;
}

export interface Stats {
  total: number;
  routes: Record<string, number>;
  review_rate: number;
  counts: Record<ReviewAction, number>;
  rates: Record<ReviewAction, number>;
  resolved: number;
  rejected: number;
  pending: number;
}

export interface ErrorDistribution {
  iteration: number;
  e: number[];
  support_counts: number[];
}

export interface IterationState {
  t: number;
  status: string;
  model_tag: string;
  metrics_history: { overall_acc: number }[];
  budget_spent: number;
  exported_sets: string[];
  halt_reason: string;
}

export interface PrototypeSummary {
  iteration: number;
  prototypes: { prototype_id: string; member_count: number; dominant_capabilities: number[] }[];
}

export interface QueueFilters {
  modality?: string;
  iteration?: number;
  route?: Route;
}
