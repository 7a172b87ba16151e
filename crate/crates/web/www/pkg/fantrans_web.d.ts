/* tslint:disable */
/* eslint-disable */

/**
 * One attention map before and after the drop rule, row-major `N × N`.
 */
export class AttentionView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Entries kept per row or column by the row and column rules.
     */
    readonly keep: number;
    /**
     * Binary column mask of the learnable rule; all ones otherwise.
     */
    readonly mask: Float64Array;
    readonly n: number;
    readonly post: Float64Array;
    readonly pre: Float64Array;
}

/**
 * One rendered synthetic face.
 */
export class SampleView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly labels: Uint8Array;
    /**
     * `size × size × 4` bytes for an `ImageData`.
     */
    readonly rgba: Uint8Array;
    readonly size: number;
}

/**
 * Result of the one-to-many aggregation on one vote matrix.
 */
export class TopKView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Per-AU logit: the sum of the `k` largest votes in its column.
     */
    readonly scores: Float64Array;
    /**
     * Row-major `N × N`; 1 where a vote was counted.
     */
    readonly selected: Uint8Array;
}

export function attention_drop(n: number, mode: string, seed: number, sharpness: number, mask_logits: Float64Array): AttentionView;

/**
 * Random votes in `[-1, 1]` rounded to two decimals, for the page's
 * "shuffle" button.
 */
export function random_votes(n: number, seed: number): Float64Array;

export function synth_sample(n_au: number, image_size: number, seed: number, index: number, noise_rate: number): SampleView;

export function topk_votes(votes: Float64Array, n: number, k: number): TopKView;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_attentionview_free: (a: number, b: number) => void;
    readonly __wbg_sampleview_free: (a: number, b: number) => void;
    readonly __wbg_topkview_free: (a: number, b: number) => void;
    readonly attention_drop: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly attentionview_keep: (a: number) => number;
    readonly attentionview_mask: (a: number) => [number, number];
    readonly attentionview_n: (a: number) => number;
    readonly attentionview_post: (a: number) => [number, number];
    readonly attentionview_pre: (a: number) => [number, number];
    readonly random_votes: (a: number, b: number) => [number, number];
    readonly sampleview_labels: (a: number) => [number, number];
    readonly sampleview_rgba: (a: number) => [number, number];
    readonly sampleview_size: (a: number) => number;
    readonly synth_sample: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly topk_votes: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly topkview_scores: (a: number) => [number, number];
    readonly topkview_selected: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
