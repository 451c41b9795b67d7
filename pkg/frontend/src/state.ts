// Session persistence: enough to resume a half-finished batch after a page
// refresh. Only client-side progress is stored; the server remains the
// authority on which votes exist.

export interface SessionState {
  workerId: string;
  batchId: string | null;
  cursor: number; // index of the next unanswered item
  submitted: Record<string, true>; // item ids already acknowledged
  completed: boolean;
}

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

const KEY = "rating-session";

export function freshSession(workerId: string): SessionState {
  return { workerId, batchId: null, cursor: 0, submitted: {}, completed: false };
}

export function loadSession(storage: StorageLike): SessionState | null {
  const raw = storage.getItem(KEY);
  if (raw === null) return null;
  try {
    const parsed = JSON.parse(raw) as SessionState;
    if (typeof parsed.workerId !== "string" || typeof parsed.cursor !== "number") return null;
    return parsed;
  } catch {
    return null;
  }
}

export function saveSession(storage: StorageLike, state: SessionState): void {
  storage.setItem(KEY, JSON.stringify(state));
}

export function clearSession(storage: StorageLike): void {
  storage.removeItem(KEY);
}
