/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Cumulative signal fraction at `step`.
     */
    alphaBar(step: number): number;
    /**
     * New scene of `template` (straight, left_turn, right_turn, obstacle, merge).
     */
    constructor(seed: number, template: string);
    noise(step: number, seed: number): void;
    numSteps(): number;
    /**
     * Shows the clean anchors again.
     */
    reset(): void;
    sceneId(): string;
    /**
     * Reward breakdown as JSON.
     */
    score(lambda_safe: number, d_thresh: number): string;
    svg(d_thresh: number): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_alphaBar: (a: number, b: number) => number;
    readonly demo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_noise: (a: number, b: number, c: number) => [number, number];
    readonly demo_numSteps: (a: number) => number;
    readonly demo_reset: (a: number) => void;
    readonly demo_sceneId: (a: number) => [number, number];
    readonly demo_score: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_svg: (a: number, b: number) => [number, number];
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
