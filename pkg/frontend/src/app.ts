// Rater-facing single-page app: entry question, then one description pair per
// screen beside the article snippet, forced choice, progress, completion.

import { ApiClient, BatchView, Choice } from "./api.js";
import {
  SessionState,
  StorageLike,
  clearSession,
  freshSession,
  loadSession,
  saveSession,
} from "./state.js";

const INSTRUCTIONS =
  "Read the article excerpt, then pick the description that better says in " +
  "one phrase what the article is about. You must choose one of the two.";

export class RatingApp {
  private session: SessionState | null = null;
  private batch: BatchView | null = null;
  private selection: Choice | null = null;
  private submitting = false;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient,
    private readonly storage: StorageLike,
  ) {}

  async start(): Promise<void> {
    const saved = loadSession(this.storage);
    if (saved && saved.batchId !== null && !saved.completed) {
      // refresh mid-batch: the server re-serves the unfinished batch
      this.session = saved;
      const batch = await this.api.fetchBatch(saved.workerId);
      if (batch && batch.batch_id === saved.batchId) {
        this.batch = batch;
        this.renderItem();
        return;
      }
    }
    await this.renderGate();
  }

  // -- screens --------------------------------------------------------------

  private async renderGate(): Promise<void> {
    const question = await this.api.entryQuestion();
    const choices = question.choices
      .map(
        (choice, index) => `
        <label class="entry-choice">
          <input type="radio" name="entry" value="${index}" data-testid="entry-${index}">
          ${escapeHtml(choice)}
        </label>`,
      )
      .join("");
    this.root.innerHTML = `
      <section class="screen gate" data-testid="screen-gate">
        <h1>Description rating</h1>
        <p class="instructions">${escapeHtml(INSTRUCTIONS)}</p>
        <label>Worker id
          <input type="text" data-testid="worker-id" placeholder="your worker id">
        </label>
        <fieldset>
          <legend>${escapeHtml(question.question)}</legend>
          ${choices}
        </fieldset>
        <button data-testid="gate-submit">Start</button>
        <p class="error" data-testid="gate-error" hidden></p>
      </section>`;
    this.query("gate-submit").addEventListener("click", () => void this.submitGate());
  }

  private async submitGate(): Promise<void> {
    const workerId = (this.query("worker-id") as HTMLInputElement).value.trim();
    const picked = this.root.querySelector<HTMLInputElement>("input[name=entry]:checked");
    const errorBox = this.query("gate-error");
    if (!workerId || !picked) {
      errorBox.textContent = "Enter your worker id and answer the question.";
      errorBox.hidden = false;
      return;
    }
    const admitted = await this.api.gate(workerId, Number(picked.value));
    if (!admitted) {
      this.renderMessage(
        "not-admitted",
        "Thanks for your interest. You are not eligible for this task.",
      );
      return;
    }
    const batch = await this.api.fetchBatch(workerId);
    if (batch === null) {
      this.renderMessage("no-batches", "No rating batches are available right now.");
      return;
    }
    this.session = { ...freshSession(workerId), batchId: batch.batch_id };
    this.batch = batch;
    saveSession(this.storage, this.session);
    this.renderItem();
  }

  private renderItem(): void {
    const session = this.session;
    const batch = this.batch;
    if (!session || !batch) throw new Error("renderItem without an active batch");
    if (session.cursor >= batch.items.length) {
      this.renderDone();
      return;
    }
    const item = batch.items[session.cursor]!;
    this.selection = null;
    this.submitting = false;
    this.root.innerHTML = `
      <section class="screen item" data-testid="screen-item">
        <header>
          <span data-testid="progress">Item ${session.cursor + 1} of ${batch.items.length}</span>
        </header>
        <p class="instructions">${escapeHtml(INSTRUCTIONS)}</p>
        <article class="snippet" data-testid="snippet">${escapeHtml(item.snippet)}</article>
        <div class="options">
          <button class="option-card" data-testid="option-1">${escapeHtml(item.option_1)}</button>
          <button class="option-card" data-testid="option-2">${escapeHtml(item.option_2)}</button>
        </div>
        <button data-testid="submit" disabled>Submit choice</button>
      </section>`;
    this.query("option-1").addEventListener("click", () => this.select("option_1"));
    this.query("option-2").addEventListener("click", () => this.select("option_2"));
    this.query("submit").addEventListener("click", () => void this.submitChoice());
  }

  private select(choice: Choice): void {
    this.selection = choice;
    this.query("option-1").classList.toggle("selected", choice === "option_1");
    this.query("option-2").classList.toggle("selected", choice === "option_2");
    (this.query("submit") as HTMLButtonElement).disabled = false;
  }

  private async submitChoice(): Promise<void> {
    const session = this.session;
    const batch = this.batch;
    if (!session || !batch || this.selection === null || this.submitting) return;
    const item = batch.items[session.cursor]!;
    this.submitting = true;
    const submitButton = this.query("submit") as HTMLButtonElement;
    submitButton.disabled = true;
    try {
      // "recorded" and "duplicate" both mean the server has exactly one vote
      await this.api.vote(batch.batch_id, item.item_id, session.workerId, this.selection);
    } catch (failure) {
      this.submitting = false;
      submitButton.disabled = false;
      this.flashError(`Could not submit your choice (${String(failure)}). Try again.`);
      return;
    }
    session.submitted[item.item_id] = true;
    session.cursor += 1;
    session.completed = session.cursor >= batch.items.length;
    saveSession(this.storage, session);
    this.renderItem();
  }

  private renderDone(): void {
    const session = this.session;
    if (!session) return;
    this.root.innerHTML = `
      <section class="screen done" data-testid="screen-done">
        <h1>All done</h1>
        <p>Thank you! Your batch is complete.</p>
        <p>Receipt: <code data-testid="receipt">${escapeHtml(session.batchId ?? "")}</code></p>
        <button data-testid="next-batch">Rate another batch</button>
      </section>`;
    clearSession(this.storage);
    this.query("next-batch").addEventListener("click", () => void this.nextBatch(session.workerId));
  }

  private async nextBatch(workerId: string): Promise<void> {
    const batch = await this.api.fetchBatch(workerId);
    if (batch === null) {
      this.renderMessage("no-batches", "No rating batches are available right now.");
      return;
    }
    this.session = { ...freshSession(workerId), batchId: batch.batch_id };
    this.batch = batch;
    saveSession(this.storage, this.session);
    this.renderItem();
  }

  private renderMessage(testId: string, text: string): void {
    this.root.innerHTML = `
      <section class="screen message" data-testid="screen-${testId}">
        <p>${escapeHtml(text)}</p>
      </section>`;
  }

  private flashError(text: string): void {
    let box = this.root.querySelector<HTMLElement>("[data-testid=flash-error]");
    if (!box) {
      box = document.createElement("p");
      box.dataset.testid = "flash-error";
      box.className = "error";
      this.root.append(box);
    }
    box.textContent = text;
  }

  private query(testId: string): HTMLElement {
    const found = this.root.querySelector<HTMLElement>(`[data-testid=${testId}]`);
    if (!found) throw new Error(`missing element ${testId}`);
    return found;
  }
}

function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}
