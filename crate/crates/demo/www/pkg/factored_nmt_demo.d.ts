/* tslint:disable */
/* eslint-disable */

export class Scores {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    bleu: number;
    chrf3: number;
}

/**
 * Toy model trained in the page.
 */
export class ToyTranslator {
    free(): void;
    [Symbol.dispose](): void;
    attention(line: string): Float64Array;
    /**
     * Trains on the generated toy corpus; blocks until done.
     */
    constructor(with_pos: boolean, hidden: number, updates: number, seed: number);
    translate(line: string): string;
    readonly ambiguous_accuracy: number;
    readonly dev_perplexity: number;
}

export function annotate(input: string, merges: string): string;

export function score(hyp: string, reference: string): Scores;

/**
 * `count` sample `word|POS` source lines.
 */
export function toy_examples(count: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_get_scores_bleu: (a: number) => number;
    readonly __wbg_get_scores_chrf3: (a: number) => number;
    readonly __wbg_scores_free: (a: number, b: number) => void;
    readonly __wbg_set_scores_bleu: (a: number, b: number) => void;
    readonly __wbg_set_scores_chrf3: (a: number, b: number) => void;
    readonly __wbg_toytranslator_free: (a: number, b: number) => void;
    readonly annotate: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly score: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly toy_examples: (a: number, b: number) => [number, number];
    readonly toytranslator_ambiguous_accuracy: (a: number) => number;
    readonly toytranslator_attention: (a: number, b: number, c: number) => [number, number, number, number];
    readonly toytranslator_dev_perplexity: (a: number) => number;
    readonly toytranslator_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly toytranslator_translate: (a: number, b: number, c: number) => [number, number, number, number];
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
