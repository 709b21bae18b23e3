/* tslint:disable */
/* eslint-disable */

export class JsPanel {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    boxes(): Float64Array;
    rgba(): Uint8Array;
    size(): number;
}

export function class_names(): string[];

export function complexityTable(input_size: number): string;

export function ghostCost(c: number, n: number, ratio: number, k: number, d: number, size: number): Float64Array;

export function nmsDemo(seed: number, objects: number, per_object: number, extent: number, conf: number, iou: number): Float64Array;

export function synthPanel(seed: number, size: number, scratch_heavy: boolean): JsPanel;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_jspanel_free: (a: number, b: number) => void;
    readonly class_names: () => [number, number];
    readonly complexityTable: (a: number) => [number, number, number, number];
    readonly ghostCost: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly jspanel_boxes: (a: number) => [number, number];
    readonly jspanel_rgba: (a: number) => [number, number];
    readonly jspanel_size: (a: number) => number;
    readonly nmsDemo: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly synthPanel: (a: number, b: number, c: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
