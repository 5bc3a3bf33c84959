/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_get_scores_bleu: (a: number) => number;
export const __wbg_get_scores_chrf3: (a: number) => number;
export const __wbg_scores_free: (a: number, b: number) => void;
export const __wbg_set_scores_bleu: (a: number, b: number) => void;
export const __wbg_set_scores_chrf3: (a: number, b: number) => void;
export const __wbg_toytranslator_free: (a: number, b: number) => void;
export const annotate: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const score: (a: number, b: number, c: number, d: number) => [number, number, number];
export const toy_examples: (a: number, b: number) => [number, number];
export const toytranslator_ambiguous_accuracy: (a: number) => number;
export const toytranslator_attention: (a: number, b: number, c: number) => [number, number, number, number];
export const toytranslator_dev_perplexity: (a: number) => number;
export const toytranslator_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const toytranslator_translate: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
