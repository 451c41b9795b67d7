// Typed client for the rating-service HTTP API. The client only ever sees
// the stripped wire format: batch items carry an id, the article snippet,
// and two anonymous options.

export interface EntryQuestionView {
  campaign_id: string;
  language: string;
  question: string;
  choices: string[];
}

export interface BatchItem {
  item_id: string;
  snippet: string;
  option_1: string;
  option_2: string;
}

export interface BatchView {
  batch_id: string;
  language: string;
  items: BatchItem[];
}

export type Choice = "option_1" | "option_2";
export type VoteOutcome = "recorded" | "duplicate";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function errorFrom(response: Response): Promise<ApiError> {
  let code = "unknown";
  let message = response.statusText;
  try {
    const body = (await response.json()) as { code?: string; message?: string };
    code = body.code ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(response.status, code, message);
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
    private readonly retries: number = 2,
  ) {}

  async entryQuestion(): Promise<EntryQuestionView> {
    const response = await this.fetchFn(`${this.baseUrl}/entry-question`);
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as EntryQuestionView;
  }

  async gate(workerId: string, answer: number): Promise<boolean> {
    const response = await this.fetchFn(`${this.baseUrl}/gate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ worker_id: workerId, answer }),
    });
    if (!response.ok) throw await errorFrom(response);
    const body = (await response.json()) as { admitted: boolean };
    return body.admitted;
  }

  // Without `next`, the server re-serves an unfinished batch, so refreshing
  // mid-batch resumes the same ten items.
  async fetchBatch(workerId: string): Promise<BatchView | null> {
    const params = new URLSearchParams({ worker_id: workerId });
    const response = await this.fetchFn(`${this.baseUrl}/batch?${params}`);
    if (!response.ok) throw await errorFrom(response);
    const body = (await response.json()) as { batch: BatchView | null };
    return body.batch;
  }

  // The (item_id, worker_id) pair is the idempotency token: the server
  // answers 409 for a repeat, which callers treat as already recorded.
  // Network failures are retried with the identical payload.
  async vote(
    batchId: string,
    itemId: string,
    workerId: string,
    choice: Choice,
  ): Promise<VoteOutcome> {
    let lastFailure: unknown = null;
    for (let attempt = 0; attempt <= this.retries; attempt++) {
      let response: Response;
      try {
        response = await this.fetchFn(`${this.baseUrl}/vote`, {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify({
            batch_id: batchId,
            item_id: itemId,
            worker_id: workerId,
            choice,
          }),
        });
      } catch (failure) {
        lastFailure = failure;
        continue;
      }
      if (response.ok) return "recorded";
      if (response.status === 409) return "duplicate";
      throw await errorFrom(response);
    }
    throw new ApiError(0, "network", `vote failed after retries: ${String(lastFailure)}`);
  }
}
