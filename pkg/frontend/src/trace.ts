/**
 * Client-side loss trace: an append-only buffer filled by since-based
 * polling. The buffer mirrors the service's optimization rows (iteration 1
 * upward) and enforces that they arrive strictly consecutively, so a
 * completed polling sequence can neither drop nor duplicate a point.
 */

import type { TracePage, TraceRow } from "./api.js";

export class TraceBuffer {
  private rows_: TraceRow[] = [];

  get rows(): readonly TraceRow[] {
    return this.rows_;
  }

  get length(): number {
    return this.rows_.length;
  }

  /** Iteration of the newest row; 0 when empty (the polling baseline). */
  get lastIteration(): number {
    const last = this.rows_[this.rows_.length - 1];
    return last ? last.iteration : 0;
  }

  /**
   * Append one polled batch. Rows must continue the buffer without a gap —
   * batch i must carry iterations lastIteration+1, +2, ... as the service
   * guarantees for `since=lastIteration`.
   */
  append(batch: readonly TraceRow[]): void {
    let expected = this.lastIteration + 1;
    for (const row of batch) {
      if (row.iteration !== expected) {
        throw new Error(
          `trace discontinuity: expected iteration ${expected}, got ${row.iteration}`,
        );
      }
      this.rows_.push(row);
      expected++;
    }
  }

  clear(): void {
    this.rows_ = [];
  }
}

export interface PollStep {
  appended: number;
  /** Set when the fetch failed; the buffer is untouched in that case. */
  error?: unknown;
}

const BACKOFF_BASE_MS = 250;
const BACKOFF_CAP_MS = 5_000;

/**
 * One polling cycle at a time: fetch rows after the buffer's last iteration
 * and append them. Failures back off exponentially (250 ms doubling to a
 * 5 s cap) and the next success resets the delay.
 */
export class TracePoller {
  readonly buffer: TraceBuffer;
  private failures = 0;

  constructor(
    private readonly fetchPage: (since: number) => Promise<TracePage>,
    buffer?: TraceBuffer,
  ) {
    this.buffer = buffer ?? new TraceBuffer();
  }

  /** Delay to wait before the next step; 0 while polling is healthy. */
  get retryDelayMs(): number {
    if (this.failures === 0) return 0;
    return Math.min(BACKOFF_BASE_MS * 2 ** (this.failures - 1), BACKOFF_CAP_MS);
  }

  get failing(): boolean {
    return this.failures > 0;
  }

  async step(): Promise<PollStep> {
    try {
      const page = await this.fetchPage(this.buffer.lastIteration);
      this.buffer.append(page.rows);
      this.failures = 0;
      return { appended: page.rows.length };
    } catch (error) {
      this.failures++;
      return { appended: 0, error };
    }
  }
}
