/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_attentionview_free: (a: number, b: number) => void;
export const __wbg_sampleview_free: (a: number, b: number) => void;
export const __wbg_topkview_free: (a: number, b: number) => void;
export const attention_drop: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
export const attentionview_keep: (a: number) => number;
export const attentionview_mask: (a: number) => [number, number];
export const attentionview_n: (a: number) => number;
export const attentionview_post: (a: number) => [number, number];
export const attentionview_pre: (a: number) => [number, number];
export const random_votes: (a: number, b: number) => [number, number];
export const sampleview_labels: (a: number) => [number, number];
export const sampleview_rgba: (a: number) => [number, number];
export const sampleview_size: (a: number) => number;
export const synth_sample: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const topk_votes: (a: number, b: number, c: number, d: number) => [number, number, number];
export const topkview_scores: (a: number) => [number, number];
export const topkview_selected: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
